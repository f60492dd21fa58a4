"""Desk-scale experiment runners shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluate as ev
from .config import ABLATIONS, TrainConfig, completion_config, desk_config
from .pipeline import (Checkpoint, Dataset, PretrainResult, hash_seed, make_completion_dataset,
                       make_partial, pretrain_encoders, random_shape, split_train_test,
                       synthetic_dataset, train)

CLASSES = ("sphere", "box", "cylinder", "two-part-chair")
PART_CLASSES = ("two-part-chair", "two-part-table")

# step budgets sized to finish a full run in well under a minute on one core
DESK_STEPS = 1000
DESK_PRETRAIN_STEPS = 300


@dataclass
class DeskRun:
    cfg: TrainConfig
    train_set: Dataset
    test_set: Dataset
    pretrain: PretrainResult
    checkpoint: Checkpoint
    train_accuracy: float
    test_accuracy: float
    seconds: float
    embeddings: dict = field(default_factory=dict)

    @property
    def history(self):
        return self.checkpoint.history

    @property
    def loss_drop(self):
        """Relative fall of the total loss from step 0 to the last step."""
        h = self.history
        return 1.0 - h[-1].total / h[0].total


def desk_datasets(seed=0, per_class=30, n_test=40, classes=CLASSES, N=128):
    data = synthetic_dataset(classes, per_class, 2 * N, seed=hash_seed("desk-data", seed))
    return split_train_test(data, n_test, seed)


def run_desk(seed=0, overrides=None, steps=DESK_STEPS, pretrain_steps=DESK_PRETRAIN_STEPS,
             encoders: Optional[PretrainResult] = None, datasets=None, log_path=None) -> DeskRun:
    """Pretrain, train MAP-VAE and probe H on the 4-class synthetic set."""
    t0 = time.time()
    cfg = desk_config(seed=seed, steps=steps, pretrain_steps=pretrain_steps, Z=16,
                      **(overrides or {}))
    tr, te = datasets or desk_datasets(seed, N=cfg.N)
    pre = encoders or pretrain_encoders(tr, cfg)
    ckpt = train(tr, pre.encoders, cfg, log_path=log_path)
    Xtr = ev.embed_dataset(tr.inputs, ckpt.model, pre.encoders, cfg)
    Xte = ev.embed_dataset(te.inputs, ckpt.model, pre.encoders, cfg)
    probe = ev.train_probe(Xtr, tr.labels, seed=seed)
    return DeskRun(cfg, tr, te, pre, ckpt,
                   ev.accuracy(probe.predict(Xtr), tr.labels),
                   ev.accuracy(probe.predict(Xte), te.labels),
                   time.time() - t0, {"train": Xtr, "test": Xte})


def run_ablation(seeds=(0, 1, 2), variants=("All", "No P"), steps=DESK_STEPS,
                 pretrain_steps=DESK_PRETRAIN_STEPS, reuse=None):
    """Probe accuracy per (variant, seed); encoders are shared across variants of a seed.

    ``reuse`` maps (variant, seed) to an existing DeskRun.
    """
    reuse = dict(reuse or {})
    rows = []
    for seed in seeds:
        datasets = desk_datasets(seed)
        pre = None
        for variant in variants:
            run = reuse.get((variant, seed))
            if run is None:
                run = run_desk(seed, ABLATIONS[variant], steps, pretrain_steps, encoders=pre,
                               datasets=datasets)
            pre = pre or run.pretrain
            rows.append(dict(variant=variant, seed=seed, test_accuracy=run.test_accuracy,
                             train_accuracy=run.train_accuracy,
                             final_total=run.history[-1].total))
    return rows


@dataclass
class SegmentationRun:
    report: ev.SegmentationReport
    checkpoint: Checkpoint
    seconds: float


def run_segmentation(seed=0, per_class=20, n_test=10, steps=DESK_STEPS,
                     pretrain_steps=DESK_PRETRAIN_STEPS) -> SegmentationRun:
    t0 = time.time()
    cfg = desk_config(seed=seed, steps=steps, pretrain_steps=pretrain_steps)
    tr, te = desk_datasets(seed, per_class, n_test, PART_CLASSES, cfg.N)
    pre = pretrain_encoders(tr, cfg)
    ckpt = train(tr, pre.encoders, cfg)
    report = ev.segment(tr.inputs, te.inputs, ckpt.model, pre.encoders, cfg, seed=seed)
    return SegmentationRun(report, ckpt, time.time() - t0)


@dataclass
class CompletionRun:
    results: list          # CompletionResult per held-out shape
    checkpoint: Checkpoint
    first_emd: float       # mean completion EMD/point on the training pairs at step 0 weights
    seconds: float

    @property
    def win_rate(self):
        return float(np.mean([r.emd_per_point < r.baseline_per_point for r in self.results]))


def completion_pairs(seed, per_class, classes, N):
    completes = [random_shape(kind, 2 * N, hash_seed("completion", seed, c, j))
                 for c, kind in enumerate(classes) for j in range(per_class)]
    partials = [make_partial(c, hash_seed("partial", seed, j)) for j, c in enumerate(completes)]
    return make_completion_dataset(partials, completes, N, seed)


def run_completion(seed=0, per_class=20, n_test=20, classes=CLASSES, steps=DESK_STEPS,
                   pretrain_steps=DESK_PRETRAIN_STEPS) -> CompletionRun:
    """Train the completion preset on synthetic partials and score held-out shapes."""
    t0 = time.time()
    cfg = completion_config(seed=seed, steps=steps, pretrain_steps=pretrain_steps)
    data = completion_pairs(seed, per_class, classes, cfg.N)
    data.labels = np.repeat(np.arange(len(classes)), per_class)
    tr, te = split_train_test(data, n_test, seed)
    # encoders learn from complete shapes; MAP-VAE then maps partial inputs to complete targets
    pre = pretrain_encoders(Dataset(tr.targets), cfg)
    untrained = train(tr, pre.encoders, cfg, steps=0)
    first = np.mean([ev.complete(untrained.model, pre.encoders, p, t, cfg).emd_per_point
                     for p, t in zip(te.inputs, te.targets)])
    ckpt = train(tr, pre.encoders, cfg)
    results = [ev.complete(ckpt.model, pre.encoders, p, t, cfg)
               for p, t in zip(te.inputs, te.targets)]
    return CompletionRun(results, ckpt, float(first), time.time() - t0)
