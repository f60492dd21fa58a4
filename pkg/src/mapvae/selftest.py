"""Fast oracle and gradient checks runnable from the CLI (``mapvae selftest``)."""
from __future__ import annotations

import sys

import numpy as np

from . import diffcore as dc
from .transport import emd_bruteforce, emd_exact


def _emd_oracle(rng, pairs):
    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(2, 9))
        A, B = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        for solver in ("scipy", "hungarian"):
            worst = max(worst, abs(emd_exact(A, B, solver).cost - emd_bruteforce(A, B).cost))
    return worst <= 1e-9, f"max |exact - brute force| = {worst:.2e}"


def _gradients(rng):
    x = rng.normal(size=(4, 3))
    params = dc.GRUParams(dc.parameter(rng.normal(size=(3, 12)) * 0.5),
                          dc.parameter(rng.normal(size=(4, 12)) * 0.5),
                          dc.parameter(rng.normal(size=12) * 0.1))
    point = {"x": x, "W": rng.normal(size=(3, 5)), "b": rng.normal(size=5),
             "h": rng.normal(size=(4, 4)), "gW": params.W.value, "gU": params.U.value,
             "gb": params.b.value, "mu": rng.normal(size=6), "ls": rng.normal(size=6) * 0.3}

    def f(t):
        a = dc.tanh(dc.affine(t["x"], t["W"], t["b"]))
        pooled = dc.set_max_pool(a, axis=0)
        h = dc.gru_step(t["x"], t["h"], dc.GRUParams(t["gW"], t["gU"], t["gb"]))
        kl = dc.kl_diag_gaussian(t["mu"], dc.exp(t["ls"]))
        return dc.add(dc.add(dc.sum(dc.square(pooled)), dc.sum(dc.square(h))), kl)

    rep = dc.grad_check(f, point, tolerance=1e-4)
    return rep.passed, f"max relative gradient error {rep.max_error:.2e}"


def _kl_monte_carlo(rng, samples):
    mu, sigma = rng.normal(size=3), np.exp(rng.normal(size=3) * 0.3)
    closed = float(dc.kl_diag_gaussian(mu, sigma).value)
    z = mu + sigma * rng.standard_normal((samples, 3))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + 2 * np.log(sigma)).sum(axis=1)
    log_p = -0.5 * (z ** 2).sum(axis=1)
    mc = float(np.mean(log_q - log_p))
    rel = abs(mc - closed) / max(closed, 1e-12)
    return rel <= 0.02, f"closed form {closed:.4f}, Monte Carlo {mc:.4f}"


def run_selftest(quick=False, stream=sys.stdout) -> int:
    rng = np.random.default_rng(2024)
    checks = [("emd oracle", lambda: _emd_oracle(rng, 20 if quick else 100)),
              ("primitive gradients", lambda: _gradients(rng)),
              ("kl monte carlo", lambda: _kl_monte_carlo(rng, 100_000 if quick else 1_000_000))]
    failures = 0
    for name, check in checks:
        ok, detail = check()
        failures += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", file=stream)
    return failures
