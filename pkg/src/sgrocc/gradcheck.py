"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .fusion import FusionWeights, fuse, fuse_gradients
from .lifter import GateParams, gate_gradients, gaussian_gate
from .refiner import GrmStrategy, default_kappa, grm_loss

OPS = ("gate", "grm", "fusion")

# denominators below this are treated as this; keeps near-zero partials from
# turning round-off into huge relative errors
REL_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    trials: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def row(self) -> dict:
        return {"op": self.op, "trials": self.trials, "max_rel_err": self.max_rel_err, "tol": self.tol, "passed": int(self.passed)}


def rel_err(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def central_diff(f, x: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` (any shape) by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gf[i] = (up - down) / (2.0 * h)
    return g


def _gate_trial(rng, h):
    alpha = rng.uniform(0.1, 2.0)
    sigma = rng.uniform(0.1, 2.0)
    d_proj = rng.uniform(0.5, 5.0)
    d_pred = d_proj + rng.uniform(-3.0, 3.0) * sigma
    an = gate_gradients(d_proj, d_pred, GateParams(alpha, sigma))

    def f(x):
        return float(gaussian_gate(d_proj, x[2], GateParams(x[0], x[1])))

    num = central_diff(f, np.array([alpha, sigma, d_pred]), h)
    return rel_err([an["alpha"], an["sigma"], an["d_pred"]], num)


def _grm_trial(rng, h):
    n = int(rng.integers(2, 9))
    P = rng.normal(0.0, 0.5, (n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    labels = rng.integers(1, 12, n)
    m = int(rng.integers(1, 2 * n))
    a = rng.integers(0, n, m)
    b = (a + rng.integers(1, n, m)) % n
    pairs = np.unique(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1), axis=0)
    kind = ("uniform", "semantic_adaptive")[int(rng.integers(0, 2))]
    strategy = GrmStrategy(kind, float(rng.uniform(0.1, 1.0)), default_kappa(float(rng.uniform(0.05, 1.0))))
    _, an = grm_loss(P, labels, normals, pairs, strategy)
    num = central_diff(lambda x: grm_loss(x, labels, normals, pairs, strategy)[0], P, h)
    return rel_err(an, num)


def _fusion_trial(rng, h):
    C = int(rng.integers(1, 7))
    B = int(rng.integers(1, 5))
    Fh = rng.normal(size=(B, C))
    Fc = rng.normal(size=(B, C))
    delta = rng.normal(size=(B, C))
    Wh, Wc, b = rng.normal(0, 0.5, (C, C)), rng.normal(0, 0.5, (C, C)), rng.normal(0, 0.5, C)
    an = fuse_gradients(Fh, Fc, delta)
    errs = [
        rel_err(an["W_h"], central_diff(lambda x: float(np.sum(delta * fuse(Fh, Fc, FusionWeights(x, Wc, b)))), Wh, h)),
        rel_err(an["W_c"], central_diff(lambda x: float(np.sum(delta * fuse(Fh, Fc, FusionWeights(Wh, x, b)))), Wc, h)),
        rel_err(an["b"], central_diff(lambda x: float(np.sum(delta * fuse(Fh, Fc, FusionWeights(Wh, Wc, x)))), b, h)),
    ]
    return max(errs)


_TRIALS = {"gate": _gate_trial, "grm": _grm_trial, "fusion": _fusion_trial}


def check_gradients(op: str, trials: int = 100, h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Worst relative error between analytic and numeric gradients of ``op``."""
    if op not in _TRIALS:
        raise InvalidSpec(f"unknown gradient op {op!r}; choose from {OPS}")
    if trials < 1 or not h > 0:
        raise InvalidSpec("need trials >= 1 and h > 0")
    rng = np.random.default_rng(seed)
    worst = max(_TRIALS[op](rng, h) for _ in range(trials))
    return GradCheckReport(op, trials, worst, tol)
