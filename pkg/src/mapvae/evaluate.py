"""Downstream protocols: embeddings, linear probe, segmentation, generation, completion."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .errors import ConfigError, MapVaeError, SizeError
from .geometry import PointCloud, pairwise_distances
from .model import EncoderParams, MapVae, aggregate, decode, latent
from .pipeline import DEFAULT_CACHE, SplitCache, angle_table
from .transport import emd_exact


# --------------------------------------------------------------------------
# global embedding


@dataclass
class ShapeEmbedding:
    H: np.ndarray         # (D_h,)
    per_angle: np.ndarray  # (V, D_h); row i-1 is h_i


def pool_angles(per_angle) -> np.ndarray:
    return np.max(np.asarray(per_angle), axis=0)


def sample_features(cloud: PointCloud, encoders: EncoderParams, cfg: TrainConfig,
                    cache: SplitCache = None):
    """(f, fronts (V, W, D_f), backs (V, W, D_f)) for the V samples of one cloud."""
    cache = DEFAULT_CACHE if cache is None else cache
    halves = cache.halves(cloud, cfg)
    f = encoders.global_encoder.features(cloud.points)
    fr = encoders.local_encoder.features(np.stack([h.front.points for h in halves]))
    bk = encoders.local_encoder.features(np.stack([h.back.points for h in halves]))
    sel = angle_table(cfg) - 1
    return f, fr[sel], bk[sel]


def angle_features(cloud, model: MapVae, encoders, cfg=None, cache=None) -> np.ndarray:
    cfg = cfg or model.cfg
    f, fronts, _ = sample_features(cloud, encoders, cfg, cache)
    return aggregate(np.repeat(f[None], cfg.V, axis=0), fronts, model).value


def embed_shape(cloud, model: MapVae, encoders: EncoderParams, cfg=None, cache=None) -> ShapeEmbedding:
    h = angle_features(cloud, model, encoders, cfg, cache)
    return ShapeEmbedding(pool_angles(h), h)


def embed_dataset(clouds, model, encoders, cfg=None, cache=None) -> np.ndarray:
    return np.stack([embed_shape(c, model, encoders, cfg, cache).H for c in clouds])


# --------------------------------------------------------------------------
# linear probe (one-vs-rest hinge loss with L2, full-batch subgradient descent)


@dataclass
class LinearProbe:
    W: np.ndarray       # (D, K)
    b: np.ndarray       # (K,)
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, X):
        return ((np.atleast_2d(X) - self.mean) / self.scale) @ self.W + self.b

    def predict(self, X):
        return self.classes[np.argmax(self.scores(X), axis=1)]


def hinge_objective(W, b, X, T, lam):
    margins = T * (X @ W + b)
    return np.maximum(0, 1 - margins).mean(axis=0).sum() + 0.5 * lam * np.sum(W * W)


def train_probe(embeddings, labels, seed=0, lam=1e-3, lr=0.1, epochs=2000) -> LinearProbe:
    """Linear SVM by subgradient descent on the averaged hinge loss.

    Features are standardised first; ``seed`` fixes the small random
    initialisation so runs are reproducible.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigError("a probe needs at least two classes")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    T = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    rng = np.random.default_rng(seed)
    W = rng.normal(scale=1e-3, size=(X.shape[1], len(classes)))
    b = np.zeros(len(classes))
    n = len(X)
    for epoch in range(epochs):
        active = (T * (Xs @ W + b)) < 1
        gW = -(Xs.T @ (active * T)) / n + lam * W
        gb = -(active * T).sum(axis=0) / n
        step = lr / np.sqrt(1 + epoch / 100)
        W -= step * gW
        b -= step * gb
    return LinearProbe(W, b, classes, mean, scale)


def classify(probe: LinearProbe, embedding):
    return probe.predict(np.atleast_2d(embedding))[0]


def accuracy(pred, truth) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


# --------------------------------------------------------------------------
# reconstruction / generation


def reconstruct_shape(cloud, model: MapVae, encoders, start=1, cfg=None, cache=None):
    """Decode the deterministic latent of sample ``start``; returns (points, per-point features)."""
    cfg = cfg or model.cfg
    f, fronts, _ = sample_features(cloud, encoders, cfg, cache)
    h = aggregate(f[None], fronts[start - 1][None], model)
    z, _ = latent(h, model, variational=False)
    pts, feats = decode(z, model, mode="eval")
    return pts.value[0], feats.value[0]


def latent_mean(cloud, model, encoders, cfg=None, cache=None) -> np.ndarray:
    """Mean latent over all V samples of a cloud."""
    h = angle_features(cloud, model, encoders, cfg, cache)
    return latent(h, model, variational=False)[0].value.mean(axis=0)


def generate(model: MapVae, z=None, seed=0) -> PointCloud:
    """Decode ``z`` (or a draw from the unit Gaussian) into a 2N-point cloud."""
    if z is None:
        z = np.random.default_rng(seed).standard_normal(model.cfg.Z)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.cfg.Z,):
        raise SizeError(f"latent must have shape ({model.cfg.Z},), got {z.shape}")
    pts, _ = decode(z[None], model, mode="eval")
    return PointCloud(pts.value[0])


def interpolate(model: MapVae, z_a, z_b, steps=5):
    if steps < 2:
        raise ConfigError("interpolation needs at least 2 steps")
    z_a, z_b = np.asarray(z_a, float), np.asarray(z_b, float)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        z = z_a if t == 0 else z_b if t == 1 else (1 - t) * z_a + t * z_b
        out.append(generate(model, z))
    return out


# --------------------------------------------------------------------------
# completion


@dataclass
class CompletionResult:
    cloud: PointCloud
    emd_per_point: float
    baseline_per_point: float  # partial (as given) vs ground truth


def complete(model: MapVae, encoders, partial: PointCloud, truth: PointCloud,
             cfg=None, cache=None) -> CompletionResult:
    """Complete a 2N-point (resampled) partial cloud; scores EMD/point against ``truth``."""
    cfg = cfg or model.cfg
    if len(partial) != 2 * cfg.N or len(truth) != 2 * cfg.N:
        raise SizeError(f"completion expects 2N={2 * cfg.N} points")
    pts, _ = reconstruct_shape(partial, model, encoders, 1, cfg, cache)
    n = 2 * cfg.N
    return CompletionResult(PointCloud(pts), emd_exact(pts, truth).cost / n,
                            emd_exact(partial, truth).cost / n)


# --------------------------------------------------------------------------
# segmentation


def transfer_labels(points, gt_points, gt_labels, k=5) -> np.ndarray:
    """Majority label of the k nearest ground-truth points.

    A tie goes to the label of the single nearest point.
    """
    gt_labels = np.asarray(gt_labels)
    if len(gt_labels) != len(gt_points):
        raise SizeError("labels and ground-truth points differ in length")
    k = min(k, len(gt_points))
    d = pairwise_distances(np.asarray(points, float), np.asarray(gt_points, float))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    out = np.empty(len(points), dtype=np.int64)
    for i, row in enumerate(gt_labels[nn]):
        out[i] = vote(row)
    return out


def vote(ordered_labels) -> int:
    """Majority of labels listed nearest first; a tie returns the nearest label."""
    values, counts = np.unique(ordered_labels, return_counts=True)
    if np.sum(counts == counts.max()) > 1:
        return int(ordered_labels[0])
    return int(values[np.argmax(counts)])


@dataclass
class SoftmaxClassifier:
    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, X):
        s = ((X - self.mean) / self.scale) @ self.W + self.b
        return self.classes[np.argmax(s, axis=1)]


def train_softmax(X, y, epochs=300, lr=0.05, lam=1e-4, seed=0) -> SoftmaxClassifier:
    """Per-point linear softmax classifier fitted with Adam on cross-entropy."""
    X = np.asarray(X, float)
    classes, yi = np.unique(y, return_inverse=True)
    mean, scale = X.mean(axis=0), X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    rng = np.random.default_rng(seed)
    params = {"W": rng.normal(scale=1e-2, size=(X.shape[1], len(classes))),
              "b": np.zeros(len(classes))}
    onehot = np.eye(len(classes))[yi]
    state, hyper = dc.AdamState(), dc.AdamHyper(lr=lr)
    for _ in range(epochs):
        s = Xs @ params["W"] + params["b"]
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(X)
        dc.adam_step(params, {"W": Xs.T @ g + lam * params["W"], "b": g.sum(axis=0)}, state, hyper)
    return SoftmaxClassifier(params["W"], params["b"], classes, mean, scale)


def shape_ious(pred, truth, classes):
    """IoU of each part class in one shape; a part absent from both scores 1."""
    out = []
    for c in classes:
        p, t = pred == c, truth == c
        union = np.sum(p | t)
        out.append(1.0 if union == 0 else np.sum(p & t) / union)
    return np.array(out)


@dataclass
class SegmentationReport:
    accuracy: float
    miou: float
    per_class_accuracy: dict
    per_class_iou: dict
    baseline_accuracy: float    # majority class of the training points
    transfer_agreement: float   # transferred vs nearest-GT label, close points only
    transfer_close_fraction: float
    predictions: list           # per test shape


def segment(train_clouds, test_clouds, model, encoders, cfg=None, cache=None,
            close_radius=0.05, seed=0) -> SegmentationReport:
    """Label transfer by 5-NN voting, then a per-point softmax classifier on decoder features."""
    cfg = cfg or model.cfg
    if any(c.labels is None for c in list(train_clouds) + list(test_clouds)):
        raise MapVaeError("segmentation needs per-point ground-truth labels")
    agree, close = [], 0
    total = 0

    def prepare(clouds):
        nonlocal close, total
        feats, labels = [], []
        for c in clouds:
            pts, f = reconstruct_shape(c, model, encoders, 1, cfg, cache)
            lab = transfer_labels(pts, c.points, c.labels, 5)
            d = pairwise_distances(pts, c.points)
            nearest = d.argmin(axis=1)
            near = d[np.arange(len(pts)), nearest] <= close_radius
            agree.extend((lab[near] == c.labels[nearest[near]]).tolist())
            close += int(near.sum())
            total += len(pts)
            feats.append(f)
            labels.append(lab)
        return feats, labels

    tr_f, tr_l = prepare(train_clouds)
    te_f, te_l = prepare(test_clouds)
    clf = train_softmax(np.concatenate(tr_f), np.concatenate(tr_l), seed=seed)
    classes = np.unique(np.concatenate(tr_l + te_l))
    preds = [clf.predict(f) for f in te_f]
    truth = np.concatenate(te_l)
    flat = np.concatenate(preds)
    ious = np.stack([shape_ious(p, t, classes) for p, t in zip(preds, te_l)])
    per_iou = {int(c): float(ious[:, i].mean()) for i, c in enumerate(classes)}
    per_acc = {int(c): float(np.mean(flat[truth == c] == c)) if np.any(truth == c) else float("nan")
               for c in classes}
    train_lab = np.concatenate(tr_l)
    vals, counts = np.unique(train_lab, return_counts=True)
    majority = vals[np.argmax(counts)]
    return SegmentationReport(
        accuracy=accuracy(flat, truth), miou=float(np.mean(list(per_iou.values()))),
        per_class_accuracy=per_acc, per_class_iou=per_iou,
        baseline_accuracy=accuracy(np.full_like(truth, majority), truth),
        transfer_agreement=float(np.mean(agree)) if agree else float("nan"),
        transfer_close_fraction=close / max(total, 1), predictions=preds)


# --------------------------------------------------------------------------
# export


def export_cloud(cloud: PointCloud, path, format=None):
    """Write xyz-text or ascii-ply with 17 significant digits (lossless round-trip)."""
    if len(cloud) == 0:
        raise SizeError("refusing to export an empty cloud")
    path = Path(path)
    if format is None:
        format = "ascii-ply" if path.suffix.lower() == ".ply" else "xyz-text"
    labels = cloud.labels
    rows = []
    for i, p in enumerate(cloud.points):
        row = " ".join(repr(float(v)) for v in p)
        if labels is not None:
            row += f" {int(labels[i])}"
        rows.append(row)
    if format == "xyz-text":
        text = "\n".join(rows) + "\n"
    elif format == "ascii-ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
                  "property double x", "property double y", "property double z"]
        if labels is not None:
            header.append("property int label")
        text = "\n".join(header + ["end_header"] + rows) + "\n"
    else:
        raise ConfigError(f"unknown export format {format!r}")
    path.write_text(text)


def project(cloud: PointCloud, axis="y") -> np.ndarray:
    """Orthographic 2-D coordinates looking along ``axis``."""
    keep = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}[axis]
    return cloud.points[:, keep]


def export_projection(cloud: PointCloud, path, axis="y", size=400, radius=1.5):
    """Orthographic scatter as a standalone SVG; part labels pick the colour."""
    if len(cloud) == 0:
        raise SizeError("refusing to export an empty cloud")
    xy = project(cloud, axis)
    extent = max(np.abs(xy).max(), 1e-12) * 1.05
    px = (xy / extent * 0.5 + 0.5) * size
    palette = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b"]
    labels = cloud.labels if cloud.labels is not None else np.zeros(len(cloud), int)
    body = [f'<circle cx="{x:.3f}" cy="{size - y:.3f}" r="{radius}" fill="{palette[l % len(palette)]}"/>'
            for (x, y), l in zip(px, labels)]
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">\n<rect width="100%" height="100%" fill="white"/>\n'
           + "\n".join(body) + "\n</svg>\n")
    Path(path).write_text(svg)


def write_metrics_csv(rows, path, header=None):
    rows = list(rows)
    header = header or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)
