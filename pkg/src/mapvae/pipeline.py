"""Dataset assembly, encoder pretraining, MAP-VAE training and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .diffcore import AdamHyper, AdamState
from .errors import ConfigError, MapVaeError, NumericError, SizeError
from .geometry import PointCloud, normalize, select_angles, split_all_angles, synth_shape
from .model import EncoderParams, LossBreakdown, MapVae, PointDecoder, SampleBatch, loss_total

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_HEADER = ["step", "c_d", "kl", "c_r", "c_p", "total"]


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    inputs: List[PointCloud]
    targets: Optional[List[PointCloud]] = None  # defaults to inputs (self-reconstruction)
    labels: Optional[np.ndarray] = None
    class_names: tuple = ()

    def __post_init__(self):
        if self.targets is None:
            self.targets = self.inputs
        if len(self.targets) != len(self.inputs):
            raise SizeError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        idx = list(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset([self.inputs[i] for i in idx], [self.targets[i] for i in idx],
                       labels, self.class_names)


_PARAM_RANGES = {
    "sphere": {},
    "box": {"size": [(0.5, 1.2)] * 3},
    "cylinder": {"radius": (0.3, 0.6), "height": (1.0, 2.0)},
    "plane": {"width": (0.6, 1.2), "depth": (0.6, 1.2)},
    "two-part-chair": {"width": (0.4, 0.6), "depth": (0.4, 0.6), "back_height": (0.6, 1.2)},
    "two-part-table": {"width": (0.8, 1.2), "depth": (0.5, 0.8), "height": (0.5, 0.8)},
}


def random_shape(kind, count, seed, stretch=0.15):
    """A synthetic shape with randomised proportions, normalized."""
    rng = np.random.default_rng([seed, 5])
    params = {}
    for key, rng_spec in _PARAM_RANGES[kind].items():
        if isinstance(rng_spec, list):
            params[key] = tuple(rng.uniform(lo, hi) for lo, hi in rng_spec)
        else:
            params[key] = rng.uniform(*rng_spec)
    cloud = synth_shape(kind, params, count, seed=int(rng.integers(2 ** 31)))
    scale = rng.uniform(1 - stretch, 1 + stretch, size=3)
    return normalize(PointCloud(cloud.points * scale, cloud.labels))


def synthetic_dataset(kinds, per_class, count, seed=0) -> Dataset:
    clouds, labels = [], []
    for c, kind in enumerate(kinds):
        for j in range(per_class):
            clouds.append(random_shape(kind, count, seed=hash_seed(seed, c, j)))
            labels.append(c)
    return Dataset(clouds, None, np.array(labels), tuple(kinds))


def hash_seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def split_train_test(dataset: Dataset, n_test, seed=0):
    """Stratified split; ``n_test`` shapes are held out."""
    rng = np.random.default_rng([seed, 7])
    labels = dataset.labels if dataset.labels is not None else np.zeros(len(dataset), int)
    classes = np.unique(labels)
    per = n_test // len(classes)
    extra = n_test - per * len(classes)
    test = []
    for i, c in enumerate(classes):
        members = np.flatnonzero(labels == c)
        take = per + (1 if i < extra else 0)
        test += list(rng.permutation(members)[:take])
    test = sorted(int(t) for t in test)
    train = [i for i in range(len(dataset)) if i not in set(test)]
    return dataset.subset(train), dataset.subset(test)


def make_partial(cloud: PointCloud, seed=0) -> PointCloud:
    """Drop the half of the cloud lying farthest along a random direction."""
    rng = np.random.default_rng([seed, 13])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    proj = cloud.points @ d
    keep = np.sort(np.argsort(proj, kind="stable")[: len(cloud) // 2])
    return cloud.subset(keep)


def resample(cloud: PointCloud, count, seed=0) -> PointCloud:
    """Exactly ``count`` points: a subset if larger, all points plus repeats if smaller."""
    rng = np.random.default_rng([seed, 17])
    n = len(cloud)
    if n >= count:
        idx = np.sort(rng.choice(n, count, replace=False))
    else:
        idx = np.concatenate([np.arange(n), np.sort(rng.choice(n, count - n, replace=True))])
    return cloud.subset(idx)


def make_completion_dataset(partials, completes, N, seed=0) -> Dataset:
    """Pair each partial (resampled to 2N points) with its complete cloud as target."""
    if len(partials) != len(completes):
        raise SizeError(f"{len(partials)} partials but {len(completes)} complete clouds")
    inputs, targets = [], []
    for j, (p, c) in enumerate(zip(partials, completes)):
        if p is None or c is None:
            raise MapVaeError(f"missing partial/complete pair at index {j}")
        if len(c) != 2 * N:
            c = resample(c, 2 * N, hash_seed(seed, "target", j))
        inputs.append(resample(p, 2 * N, hash_seed(seed, "partial", j)))
        targets.append(c)
    return Dataset(inputs, targets)


# --------------------------------------------------------------------------
# splitting cache and frozen-encoder features


def cloud_key(cloud: PointCloud, cfg: TrainConfig):
    digest = hashlib.sha1(np.ascontiguousarray(cloud.points).tobytes()).hexdigest()
    return (digest, cfg.V, cfg.N, cfg.split_mode, cfg.k, cfg.axis, cfg.radius_scale)


class SplitCache:
    """Per-angle half splits, computed once per (cloud, splitting settings)."""

    def __init__(self):
        self._store = {}

    def __len__(self):
        return len(self._store)

    def halves(self, cloud: PointCloud, cfg: TrainConfig):
        key = cloud_key(cloud, cfg)
        if key not in self._store:
            self._store[key] = split_all_angles(cloud, cfg.V, cfg.N, cfg.split_mode, cfg.k,
                                                cfg.axis, cfg.radius_scale)
        return self._store[key]

    def prefetch(self, clouds, cfg: TrainConfig, threads=1):
        todo = [c for c in clouds if cloud_key(c, cfg) not in self._store]
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(lambda c: split_all_angles(
                    c, cfg.V, cfg.N, cfg.split_mode, cfg.k, cfg.axis, cfg.radius_scale), todo))
            for c, r in zip(todo, results):
                self._store[cloud_key(c, cfg)] = r
        else:
            for c in todo:
                self.halves(c, cfg)


DEFAULT_CACHE = SplitCache()


def angle_table(cfg: TrainConfig, seed=None):
    """(V, W) array of 1-based angle indices; row i-1 is the sample starting at angle i."""
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 19]) \
        if cfg.scheme == "random" else None
    return np.array([select_angles(cfg.V, cfg.W, cfg.scheme, i, rng) for i in range(1, cfg.V + 1)])


@dataclass
class FeatureBank:
    """Frozen-encoder features of every cloud and angle."""
    global_feat: np.ndarray   # (M, D_f)
    front_feats: np.ndarray   # (M, V, D_f)
    back_feats: np.ndarray    # (M, V, D_f)
    targets: np.ndarray       # (M, 2N, 3)
    angles: np.ndarray        # (V, W), 1-based

    def batch(self, pairs) -> SampleBatch:
        """``pairs`` of (cloud index, start angle 1..V)."""
        cl = np.array([p[0] for p in pairs])
        sel = self.angles[np.array([p[1] for p in pairs]) - 1] - 1  # (B, W), 0-based
        rows = cl[:, None]
        return SampleBatch(self.global_feat[cl], self.front_feats[rows, sel],
                           self.back_feats[rows, sel], self.targets[cl])


def build_feature_bank(dataset: Dataset, encoders: EncoderParams, cfg: TrainConfig,
                       cache: SplitCache = None) -> FeatureBank:
    cache = DEFAULT_CACHE if cache is None else cache
    cache.prefetch(dataset.inputs, cfg, cfg.threads)
    g, fronts, backs = [], [], []
    for cloud in dataset.inputs:
        if len(cloud) != 2 * cfg.N:
            raise SizeError(f"cloud has {len(cloud)} points, config expects 2N={2 * cfg.N}")
        halves = cache.halves(cloud, cfg)
        g.append(encoders.global_encoder.features(cloud.points))
        fronts.append(encoders.local_encoder.features(np.stack([h.front.points for h in halves])))
        backs.append(encoders.local_encoder.features(np.stack([h.back.points for h in halves])))
    targets = np.stack([t.points for t in dataset.targets])
    return FeatureBank(np.stack(g), np.stack(fronts), np.stack(backs), targets, angle_table(cfg))


# --------------------------------------------------------------------------
# encoder pretraining


@dataclass
class PretrainResult:
    encoders: EncoderParams
    history: list  # (step, global loss, local loss)


def _recon_loss(pred, target, kind, solver):
    if kind == "emd":
        return dc.mean(dc.emd_loss(pred, target, solver))
    return dc.mean(dc.chamfer_loss(pred, target))


def pretrain_encoders(dataset: Dataset, cfg: TrainConfig, steps=None, cache: SplitCache = None,
                      callback=None) -> PretrainResult:
    """Train global and local autoencoders by self-reconstruction, then freeze the encoders."""
    if len(dataset) == 0:
        raise MapVaeError("cannot pretrain on an empty dataset")
    cache = DEFAULT_CACHE if cache is None else cache
    steps = cfg.pretrain_steps if steps is None else steps
    encoders = EncoderParams.init(cfg, cfg.seed)
    rng0 = np.random.default_rng([cfg.seed, 29])
    dec_g = PointDecoder(rng0, cfg.D_f, 2 * cfg.N, name="pre_dec_global")
    dec_l = PointDecoder(rng0, cfg.D_f, cfg.N, name="pre_dec_local")
    clouds = np.stack([c.points for c in dataset.inputs])
    cache.prefetch(dataset.inputs, cfg, cfg.threads)
    halves = np.stack([h.front.points for c in dataset.inputs for h in cache.halves(c, cfg)]
                      + [h.back.points for c in dataset.inputs for h in cache.halves(c, cfg)])
    tensors = (encoders.global_encoder.tensors() + encoders.local_encoder.tensors()
               + dec_g.tensors() + dec_l.tensors())
    named = {t.name: t for t in tensors}
    state, hyper = AdamState(), AdamHyper(lr=cfg.pretrain_lr)
    history = []
    B = cfg.batch_size
    for step in range(steps):
        rng = np.random.default_rng([cfg.seed, 31, step])
        gi = rng.choice(len(clouds), min(B, len(clouds)), replace=False)
        li = rng.choice(len(halves), min(B, len(halves)), replace=False)
        lg = _recon_loss(dec_g(encoders.global_encoder(clouds[gi])), clouds[gi],
                         cfg.pretrain_loss, cfg.emd_solver)
        ll = _recon_loss(dec_l(encoders.local_encoder(halves[li])), halves[li],
                         cfg.pretrain_loss, cfg.emd_solver)
        for t in tensors:
            t.grad = None
        dc.add(lg, ll).backward()
        if not (np.isfinite(lg.value) and np.isfinite(ll.value)):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        dc.adam_step({k: t.value for k, t in named.items()},
                     {k: t.grad for k, t in named.items() if t.grad is not None}, state, hyper)
        history.append((step, float(lg.value), float(ll.value)))
        if callback is not None:
            callback(step, float(lg.value), float(ll.value))
    encoders.freeze()
    return PretrainResult(encoders, history)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: MapVae
    encoders: EncoderParams
    optimizer: AdamState
    config: TrainConfig
    step: int
    history: list = field(default_factory=list)  # LossBreakdown per step

    def save(self, path):
        arrays = {"format_version": np.array(CHECKPOINT_VERSION),
                  "step": np.array(self.step),
                  "adam_t": np.array(self.optimizer.t),
                  "encoders_frozen": np.array(self.encoders.frozen),
                  "config": np.array(json.dumps(self.config.to_dict()))}
        for k, v in self.model.state_dict().items():
            arrays[f"param/{k}"] = v
        for k, t in self.encoders.named_parameters().items():
            arrays[f"enc/{k}"] = t.value
        for k, v in self.optimizer.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in self.optimizer.v.items():
            arrays[f"adam_v/{k}"] = v
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise MapVaeError(f"unsupported checkpoint version {version}")
        cfg = TrainConfig.from_dict(json.loads(str(data["config"])))
        model = MapVae(cfg, cfg.seed)
        model.load_state_dict({k[6:]: v for k, v in data.items() if k.startswith("param/")})
        encoders = load_encoders_from(data, cfg)
        opt = AdamState({k[7:]: v.copy() for k, v in data.items() if k.startswith("adam_m/")},
                        {k[7:]: v.copy() for k, v in data.items() if k.startswith("adam_v/")},
                        int(data["adam_t"]))
        return cls(model, encoders, opt, cfg, int(data["step"]))


def load_encoders_from(data, cfg) -> EncoderParams:
    encoders = EncoderParams.init(cfg, cfg.seed)
    for k, t in encoders.named_parameters().items():
        t.value = np.array(data[f"enc/{k}"], dtype=np.float64)
    if bool(data.get("encoders_frozen", np.array(True))):
        encoders.freeze()
    return encoders


def save_encoders(encoders: EncoderParams, cfg: TrainConfig, path):
    arrays = {"format_version": np.array(CHECKPOINT_VERSION),
              "encoders_frozen": np.array(encoders.frozen),
              "config": np.array(json.dumps(cfg.to_dict()))}
    for k, t in encoders.named_parameters().items():
        arrays[f"enc/{k}"] = t.value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_encoders(path):
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    cfg = TrainConfig.from_dict(json.loads(str(data["config"])))
    return load_encoders_from(data, cfg), cfg


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for step, lb in enumerate(history):
            w.writerow([step] + [repr(x) for x in lb.row()])


# --------------------------------------------------------------------------
# MAP-VAE training


def sample_order(n_clouds, cfg: TrainConfig, step):
    """The (cloud, start angle) pairs of batch ``step``; epochs reshuffle by seed."""
    total = n_clouds * cfg.V
    B = cfg.batch_size
    out = []
    for pos in range(step * B, step * B + B):
        epoch, offset = divmod(pos, total)
        perm = np.random.default_rng([cfg.seed, 37, epoch]).permutation(total)
        j = int(perm[offset])
        out.append((j // cfg.V, j % cfg.V + 1))
    return out


def _check_finite(lb: LossBreakdown, step):
    bad = [n for n, v in zip(LOSS_HEADER[1:], lb.row()) if not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite loss term(s) {', '.join(bad)} at step {step}")


def train(dataset: Dataset, encoders: EncoderParams, cfg: TrainConfig, steps=None,
          resume: Checkpoint = None, checkpoint_dir=None, log_path=None,
          cache: SplitCache = None, bank: FeatureBank = None, callback=None) -> Checkpoint:
    """Optimise C_R + beta * C_P over all V samples of every cloud with frozen encoders."""
    if not encoders.frozen:
        raise ConfigError("MAP-VAE training requires pretrained, frozen encoders")
    cfg.validate()
    steps = cfg.steps if steps is None else steps
    if bank is None:
        bank = build_feature_bank(dataset, encoders, cfg, cache)
    if resume is not None:
        ckpt = resume
        ckpt.config = cfg
    else:
        ckpt = Checkpoint(MapVae(cfg, cfg.seed), encoders, AdamState(), cfg, 0)
    model = ckpt.model
    named = model.named_parameters()
    params = {k: t.value for k, t in named.items()}
    hyper = AdamHyper(lr=cfg.lr)
    for step in range(ckpt.step, steps):
        batch = bank.batch(sample_order(len(bank.targets), cfg, step))
        rng = np.random.default_rng([cfg.seed, 41, step])
        model.zero_grad()
        lb = loss_total(batch, model, rng=rng, cfg=cfg)
        _check_finite(lb, step)
        lb.tensor.backward()
        grads = {k: t.grad for k, t in named.items() if t.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k} at step {step}")
        dc.adam_step(params, grads, ckpt.optimizer, hyper)
        lb.tensor = None
        ckpt.history.append(lb)
        ckpt.step = step + 1
        if callback is not None:
            callback(step, lb)
        if checkpoint_dir and cfg.checkpoint_every and ckpt.step % cfg.checkpoint_every == 0:
            ckpt.save(Path(checkpoint_dir) / f"step{ckpt.step:06d}.npz")
    if log_path is not None:
        write_loss_csv(ckpt.history, log_path)
    return ckpt
