"""MAP-VAE branches: aggregation (A), reconstruction (R), prediction (P)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .diffcore import BatchNormState, GRUParams, Tensor
from .errors import SizeError


def _uniform(rng, fan_in, shape):
    s = np.sqrt(6.0 / fan_in) if len(shape) > 1 else 0.0
    return rng.uniform(-s, s, shape)


@dataclass
class Linear:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in, d_out, name, scale=1.0):
        return cls(dc.parameter(scale * _uniform(rng, d_in, (d_in, d_out)), f"{name}.W"),
                   dc.parameter(np.zeros(d_out), f"{name}.b"))

    def __call__(self, x):
        return dc.affine(x, self.W, self.b)

    def tensors(self):
        return [self.W, self.b]


class SetEncoder:
    """Shared per-point MLP, max pool over points, linear head to D_f."""

    def __init__(self, rng, n_points, d_f, widths=(64, 128), name="enc"):
        self.n_points = n_points
        self.layers = []
        d = 3
        for i, w in enumerate(widths):
            self.layers.append(Linear.init(rng, d, w, f"{name}.mlp{i}"))
            d = w
        self.head = Linear.init(rng, d, d_f, f"{name}.head", scale=0.5)
        self.frozen = False

    def tensors(self):
        out = []
        for layer in self.layers:
            out += layer.tensors()
        return out + self.head.tensors()

    def __call__(self, points):
        pts = points.value if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
        if pts.shape[-2:] != (self.n_points, 3):
            raise SizeError(f"encoder expects {self.n_points} points, got {pts.shape[-2]}")
        x = points if isinstance(points, Tensor) else Tensor(pts)

        def use(layer):
            # frozen encoders run on constant copies so no gradient reaches them
            return Linear(layer.W.detach(), layer.b.detach()) if self.frozen else layer

        for layer in self.layers:
            x = dc.relu(use(layer)(x))
        return use(self.head)(dc.set_max_pool(x, axis=-2))

    def features(self, points) -> np.ndarray:
        """Encode without building a graph."""
        frozen, self.frozen = self.frozen, True
        try:
            return self(points).value
        finally:
            self.frozen = frozen


class PointDecoder:
    """Fully connected decoder used only for encoder pretraining."""

    def __init__(self, rng, d_f, n_points, hidden=256, name="pre_dec"):
        self.n_points = n_points
        self.fc1 = Linear.init(rng, d_f, hidden, f"{name}.fc1")
        self.fc2 = Linear.init(rng, hidden, 3 * n_points, f"{name}.fc2", scale=0.3)

    def tensors(self):
        return self.fc1.tensors() + self.fc2.tensors()

    def __call__(self, f):
        out = self.fc2(dc.relu(self.fc1(f)))
        return dc.reshape(out, f.shape[:-1] + (self.n_points, 3))


@dataclass
class EncoderParams:
    global_encoder: SetEncoder
    local_encoder: SetEncoder
    frozen: bool = False

    @classmethod
    def init(cls, cfg: TrainConfig, seed=0):
        rng = np.random.default_rng([seed, 11])
        widths = cfg.widths()
        return cls(SetEncoder(rng, 2 * cfg.N, cfg.D_f, widths, "global"),
                   SetEncoder(rng, cfg.N, cfg.D_f, widths, "local"))

    def freeze(self):
        self.frozen = True
        self.global_encoder.frozen = True
        self.local_encoder.frozen = True
        return self

    def named_parameters(self):
        return {t.name: t for t in self.global_encoder.tensors() + self.local_encoder.tensors()}


@dataclass
class LossBreakdown:
    c_d: float
    kl: float
    c_r: float
    c_p: float
    total: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def row(self):
        return [self.c_d, self.kl, self.c_r, self.c_p, self.total]


@dataclass
class SampleBatch:
    """Encoder features and targets for B training samples."""
    global_feat: np.ndarray   # (B, D_f)
    front_feats: np.ndarray   # (B, W, D_f)
    back_feats: np.ndarray    # (B, W, D_f)
    targets: np.ndarray       # (B, 2N, 3)


class MapVae:
    """Trainable parameters of branches A, R and P."""

    def __init__(self, cfg: TrainConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 23])
        D_f, D_h, Z = cfg.D_f, cfg.D_h, cfg.Z
        w1, w2, w3 = cfg.trunk
        C = cfg.point_channels
        self.agg = GRUParams.init(rng, D_f, D_h, "agg")
        self.mu_head = Linear.init(rng, D_h, Z, "mu", scale=0.5)
        self.logvar_head = Linear.init(rng, D_h, Z, "logvar", scale=0.1)
        self.fc1 = Linear.init(rng, Z, w1, "dec.fc1")
        self.fc2 = Linear.init(rng, w1, w2, "dec.fc2")
        self.fc3 = Linear.init(rng, w2, w3, "dec.fc3", scale=0.3)
        self.conv1 = Linear.init(rng, 3, C, "dec.conv1")
        self.conv2 = Linear.init(rng, C, 3, "dec.conv2", scale=0.5)
        bn = dict(enabled=cfg.batch_norm)
        self.bn = {name: BatchNormState.init(width, f"dec.{name}", **bn)
                   for name, width in (("bn1", w1), ("bn2", w2), ("bn3", C))}
        self.pred = GRUParams.init(rng, D_f, D_h, "pred")
        self.pred_init = Linear.init(rng, D_h, D_h, "pred_init", scale=0.5)
        self.pred_start = dc.parameter(np.zeros(D_f), "pred_start")
        self.pred_out = Linear.init(rng, D_h, D_f, "pred_out", scale=0.5)

    def named_parameters(self):
        tensors = self.agg.tensors() + self.pred.tensors() + [self.pred_start]
        for lin in (self.mu_head, self.logvar_head, self.fc1, self.fc2, self.fc3,
                    self.conv1, self.conv2, self.pred_init, self.pred_out):
            tensors += lin.tensors()
        if self.cfg.batch_norm:
            for s in self.bn.values():
                tensors += [s.gamma, s.beta]
        return {t.name: t for t in tensors}

    def buffers(self):
        out = {}
        for name, s in self.bn.items():
            out[f"dec.{name}.running_mean"] = s.running_mean
            out[f"dec.{name}.running_var"] = s.running_var
        return out

    def state_dict(self):
        d = {k: t.value.copy() for k, t in self.named_parameters().items()}
        d.update({k: v.copy() for k, v in self.buffers().items()})
        return d

    def load_state_dict(self, d):
        for k, t in self.named_parameters().items():
            t.value = np.array(d[k], dtype=np.float64)
        for name, s in self.bn.items():
            s.running_mean = np.array(d[f"dec.{name}.running_mean"], dtype=np.float64)
            s.running_var = np.array(d[f"dec.{name}.running_var"], dtype=np.float64)

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None


# --------------------------------------------------------------------------
# branch A


def encode_global(cloud, encoders: EncoderParams):
    return encoders.global_encoder(getattr(cloud, "points", cloud))


def encode_local(half, encoders: EncoderParams):
    return encoders.local_encoder(getattr(half, "points", half))


def aggregate(f, front_feats, model: MapVae, W=None):
    """Run U^A over f then each front feature; return the final hidden state h_i."""
    f = dc.as_tensor(f)
    front_feats = dc.as_tensor(front_feats)
    if W is not None and front_feats.shape[-2] != W:
        raise SizeError(f"expected {W} front features, got {front_feats.shape[-2]}")
    h = Tensor(np.zeros(f.shape[:-1] + (model.cfg.D_h,)))
    h = dc.gru_step(f, h, model.agg)
    for w in range(front_feats.shape[-2]):
        h = dc.gru_step(front_feats[..., w, :], h, model.agg)
    return h


# --------------------------------------------------------------------------
# branch R


def latent(h, model: MapVae, variational=True, rng=None, eps=None):
    """Map h_i to the decoder input; returns (z, LatentGaussian or None)."""
    mu = model.mu_head(h)
    if not variational:
        return mu, None
    sigma = dc.exp(dc.mul(model.logvar_head(h), 0.5))
    lat = dc.reparameterize(mu, sigma, eps=eps, rng=rng if rng is not None else np.random.default_rng(0))
    return lat.z, lat


def decode(z, model: MapVae, mode="train"):
    """Decoder D: returns (points (..., 2N, 3), per-point features (..., 2N, C))."""
    cfg = model.cfg
    z = dc.as_tensor(z)
    if z.shape[-1] != cfg.Z:
        raise SizeError(f"latent dimension {z.shape[-1]} != Z={cfg.Z}")
    x = dc.relu(dc.batch_norm(model.fc1(z), model.bn["bn1"], mode))
    x = dc.relu(dc.batch_norm(model.fc2(x), model.bn["bn2"], mode))
    coarse = dc.reshape(model.fc3(x), z.shape[:-1] + (2 * cfg.N, 3))
    feats = dc.relu(dc.batch_norm(model.conv1(coarse), model.bn["bn3"], mode))
    return model.conv2(feats), feats


def reconstruct(h, model: MapVae, rng=None, variational=None, eps=None, mode="train"):
    """Decode h_i into a cloud; returns (cloud, per-point features, latent or None)."""
    if variational is None:
        variational = model.cfg.variational
    z, lat = latent(h, model, variational, rng, eps)
    cloud, feats = decode(z, model, mode)
    return cloud, feats, lat


# --------------------------------------------------------------------------
# branch P


def predict_backs(h, model: MapVae, W=None):
    """Predict W back-half features; step t feeds back step t-1's prediction."""
    W = model.cfg.W if W is None else W
    h = dc.as_tensor(h)
    hidden = model.pred_init(h)
    x = dc.add(Tensor(np.zeros(h.shape[:-1] + (model.cfg.D_f,))), model.pred_start)
    outs = []
    for _ in range(W):
        hidden = dc.gru_step(x, hidden, model.pred)
        x = model.pred_out(hidden)
        outs.append(x)
    return dc.stack(outs, axis=-2)


# --------------------------------------------------------------------------
# losses


def loss_reconstruction(recon, target, mu, sigma, alpha, solver="scipy"):
    """Per-sample (c_d, kl, c_r) with c_r = c_d + alpha * kl."""
    recon = dc.as_tensor(recon)
    target = np.asarray(getattr(target, "points", target), dtype=np.float64)
    single = recon.ndim == 2
    if single:
        recon = dc.reshape(recon, (1,) + recon.shape)
        target = target[None]
    if recon.shape != target.shape:
        raise SizeError(f"reconstruction {recon.shape[1:]} vs target {target.shape[1:]}")
    c_d = dc.emd_loss(recon, target, solver)
    if mu is None:
        kl = Tensor(np.zeros(len(target)))
    else:
        kl = dc.kl_diag_gaussian(mu, sigma)
        if kl.ndim == 0:
            kl = dc.reshape(kl, (1,))
    c_r = dc.add(c_d, dc.mul(kl, alpha))
    return c_d, kl, c_r


def loss_prediction(predicted, ground_truth):
    """Mean over the W steps of the squared Euclidean feature error."""
    predicted = dc.as_tensor(predicted)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if predicted.shape != gt.shape:
        raise SizeError(f"prediction {predicted.shape} vs ground truth {gt.shape}")
    sq = dc.sum(dc.square(dc.add(predicted, -gt)), axis=-1)
    return dc.mean(sq, axis=-1)


def encode_samples(samples, encoders: EncoderParams) -> SampleBatch:
    """Features for a list of TrainingSamples using (frozen) encoders."""
    g = np.stack([encoders.global_encoder.features(s.cloud.points) for s in samples])
    fronts = np.stack([encoders.local_encoder.features(np.stack([h.front.points for h in s.halves]))
                       for s in samples])
    backs = np.stack([encoders.local_encoder.features(np.stack([h.back.points for h in s.halves]))
                      for s in samples])
    targets = np.stack([s.cloud.points for s in samples])
    return SampleBatch(g, fronts, backs, targets)


def loss_total(batch: SampleBatch, model: MapVae, rng=None, eps=None, mode="train",
               cfg: TrainConfig = None) -> LossBreakdown:
    """Full forward pass of A, R and P for a batch; totals are batch means.

    ``cfg`` overrides the loss switches (alpha, beta, use_reconstruction,
    variational) of ``model.cfg``.
    """
    cfg = cfg or model.cfg
    h = aggregate(batch.global_feat, batch.front_feats, model, W=batch.front_feats.shape[1])
    B = len(batch.targets)
    if cfg.use_reconstruction:
        recon, _, lat = reconstruct(h, model, rng, cfg.variational, eps, mode)
        mu, sigma = (lat.mu, lat.sigma) if lat is not None else (None, None)
        c_d, kl, c_r = loss_reconstruction(recon, batch.targets, mu, sigma, cfg.alpha, cfg.emd_solver)
    else:
        c_d = kl = c_r = Tensor(np.zeros(B))
    pred = predict_backs(h, model, W=batch.back_feats.shape[1])
    c_p = loss_prediction(pred, batch.back_feats)
    total = dc.mean(dc.add(c_r, dc.mul(c_p, cfg.beta)))
    return LossBreakdown(float(c_d.value.mean()), float(kl.value.mean()), float(c_r.value.mean()),
                         float(c_p.value.mean()), float(total.value), total)
