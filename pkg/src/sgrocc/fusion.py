"""Identity-initialized temporal fusion, the two-phase LR schedule and a toy trainer."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimMismatch, Diverged, EpochOutOfRange, InvalidSpec


@dataclass(frozen=True, eq=False)
class FusionWeights:
    W_h: np.ndarray
    W_c: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W_h = np.array(self.W_h, dtype=np.float64)
        W_c = np.array(self.W_c, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        C = len(b)
        if W_h.shape != (C, C) or W_c.shape != (C, C):
            raise DimMismatch(f"weights must be {C}x{C}, got {W_h.shape} and {W_c.shape}")
        if not (np.all(np.isfinite(W_h)) and np.all(np.isfinite(W_c)) and np.all(np.isfinite(b))):
            raise InvalidSpec("fusion weights must be finite")
        for name, a in (("W_h", W_h), ("W_c", W_c), ("b", b)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return len(self.b)

    def is_identity(self) -> bool:
        return (
            not np.any(self.W_h)
            and np.array_equal(self.W_c, np.eye(self.dim))
            and not np.any(self.b)
        )


def init_fusion_weights(C: int, mode: str = "identity", seed: int = 0, sigma_w: float = 0.5) -> FusionWeights:
    if C < 1:
        raise InvalidSpec("feature dim must be >= 1")
    if mode == "identity":
        return FusionWeights(np.zeros((C, C)), np.eye(C), np.zeros(C))
    if mode == "random":
        rng = np.random.default_rng(seed)
        return FusionWeights(
            rng.normal(0.0, sigma_w, (C, C)),
            rng.normal(0.0, sigma_w, (C, C)),
            rng.normal(0.0, sigma_w, C),
        )
    raise InvalidSpec(f"unknown init mode {mode!r}")


def fuse(F_hist, F_curr, W: FusionWeights) -> np.ndarray:
    """``W_h F_hist + W_c F_curr + b`` for one vector or a batch of row vectors.

    With identity weights the current feature is returned as-is, so the
    result is bit-identical to ``F_curr`` whatever the history holds.
    """
    F_hist = np.asarray(F_hist, dtype=np.float64)
    F_curr = np.asarray(F_curr, dtype=np.float64)
    if F_hist.shape != F_curr.shape or F_curr.shape[-1] != W.dim:
        raise DimMismatch(f"feature shapes {F_hist.shape}, {F_curr.shape} vs fusion dim {W.dim}")
    if W.is_identity():
        return F_curr.copy()
    return F_hist @ W.W_h.T + F_curr @ W.W_c.T + W.b


def fuse_gradients(F_hist, F_curr, delta):
    """Gradients of ``sum(delta * fuse(...))`` w.r.t. ``W_h``, ``W_c`` and ``b``."""
    F_hist = np.atleast_2d(F_hist)
    F_curr = np.atleast_2d(F_curr)
    delta = np.atleast_2d(delta)
    return {"W_h": delta.T @ F_hist, "W_c": delta.T @ F_curr, "b": delta.sum(axis=0)}


# --- schedule -----------------------------------------------------------------


class ModuleGroup(str, enum.Enum):
    BACKBONE = "backbone"
    SPATIAL = "spatial_expert"
    TEMPORAL = "temporal_manager"


def _group(g) -> ModuleGroup:
    try:
        return ModuleGroup(g.value if isinstance(g, ModuleGroup) else {"spatial": "spatial_expert", "temporal": "temporal_manager"}.get(g, g))
    except ValueError:
        raise InvalidSpec(f"unknown module group {g!r}") from None


def _default_phase2():
    return {ModuleGroup.BACKBONE: 0.0, ModuleGroup.SPATIAL: 0.1, ModuleGroup.TEMPORAL: 1.0}


def _default_phase1():
    return {ModuleGroup.BACKBONE: 0.0, ModuleGroup.SPATIAL: 0.0, ModuleGroup.TEMPORAL: 1.0}


@dataclass(frozen=True)
class TrainingSchedule:
    total_epochs: int = 15
    phase1_end: int = 5
    base_lr: float = 1e-4
    multipliers: dict = field(default_factory=_default_phase2)
    phase1_multipliers: dict = field(default_factory=_default_phase1)
    warmup_epochs: int = 0
    cosine: bool = False

    def __post_init__(self):
        if not 0 < self.phase1_end < self.total_epochs:
            raise InvalidSpec("need 0 < phase1_end < total_epochs")
        if not self.base_lr > 0:
            raise InvalidSpec("base_lr must be positive")
        for table in (self.multipliers, self.phase1_multipliers):
            norm = {_group(k): float(v) for k, v in table.items()}
            if set(norm) != set(ModuleGroup):
                raise InvalidSpec("multipliers must cover backbone, spatial_expert and temporal_manager")
            if any(not 0.0 <= v <= 1.0 for v in norm.values()):
                raise InvalidSpec("multipliers must lie in [0, 1]")
        object.__setattr__(self, "multipliers", {_group(k): float(v) for k, v in self.multipliers.items()})
        object.__setattr__(self, "phase1_multipliers", {_group(k): float(v) for k, v in self.phase1_multipliers.items()})
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise InvalidSpec("warmup_epochs must be in [0, total_epochs)")

    def phase(self, epoch: int) -> int:
        return 1 if epoch <= self.phase1_end else 2


def _decimal_product(a: float, b: float) -> float:
    # multiply as decimals so 1e-4 * 0.1 gives the float nearest 1e-5
    return float(Fraction(repr(a)) * Fraction(repr(b)))


def lr_multiplier(group, epoch: int, sched: TrainingSchedule = TrainingSchedule()) -> float:
    """Per-step learning rate of ``group`` at a 1-based ``epoch``."""
    if not (isinstance(epoch, (int, np.integer)) and 1 <= epoch <= sched.total_epochs):
        raise EpochOutOfRange(f"epoch {epoch} outside 1..{sched.total_epochs}")
    g = _group(group)
    table = sched.phase1_multipliers if sched.phase(epoch) == 1 else sched.multipliers
    lr = _decimal_product(sched.base_lr, table[g])
    if sched.warmup_epochs and epoch <= sched.warmup_epochs:
        lr *= epoch / (sched.warmup_epochs + 1)
    if sched.cosine:
        span = max(sched.total_epochs - sched.warmup_epochs, 1)
        t = max(epoch - sched.warmup_epochs - 1, 0) / span
        lr *= 0.5 * (1.0 + math.cos(math.pi * t))
    return lr


# --- toy trainer --------------------------------------------------------------


@dataclass(frozen=True)
class ToyDataset:
    """Per-anchor (history, current, target) triples.

    ``raw`` is the input of the toy spatial expert, ``F_hist`` the stored
    feature from the previous frame and ``target`` the one-hot class.
    """

    raw: np.ndarray
    F_hist: np.ndarray
    target: np.ndarray


def make_toy_dataset(n: int = 512, C: int = 12, noise: float = 0.3, seed: int = 0) -> ToyDataset:
    if n < 1:
        raise InvalidSpec("dataset must be non-empty")
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, C, n)
    target = np.eye(C)[cls]
    raw = target + rng.normal(0.0, noise, (n, C))
    hist = target + rng.normal(0.0, noise, (n, C))
    return ToyDataset(raw, hist, target)


@dataclass
class ToyModel:
    spatial: np.ndarray  # C x C map applied to raw input
    backbone: np.ndarray  # C-vector input shift (always frozen in practice)
    fusion: FusionWeights

    def params(self) -> dict:
        return {
            ModuleGroup.BACKBONE: [self.backbone],
            ModuleGroup.SPATIAL: [self.spatial],
            ModuleGroup.TEMPORAL: [self.fusion.W_h, self.fusion.W_c, self.fusion.b],
        }


def toy_forward(model: ToyModel, data: ToyDataset):
    x = data.raw + model.backbone
    F_curr = x @ model.spatial.T
    out = fuse(data.F_hist, F_curr, model.fusion)
    err = out - data.target
    loss = float(np.mean(np.sum(err * err, axis=1)))
    return loss, out, F_curr, x, err


def toy_gradients(model: ToyModel, data: ToyDataset) -> dict:
    loss, out, F_curr, x, err = toy_forward(model, data)
    n = len(err)
    delta = 2.0 * err / n
    g = fuse_gradients(data.F_hist, F_curr, delta)
    d_curr = delta @ model.fusion.W_c
    g["spatial"] = d_curr.T @ x
    g["backbone"] = (d_curr @ model.spatial).sum(axis=0)
    g["loss"] = loss
    return g


def proxy_quality(out: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.argmax(out, axis=1) == np.argmax(target, axis=1)))


@dataclass
class LossCurve:
    rows: list  # (epoch, phase, loss, proxy_quality)
    step0_loss: float
    model: ToyModel
    step0_quality: float = float("nan")
    snapshots: list = field(default_factory=list)  # per-epoch copies of every group's parameters

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


def train_fusion_toy(
    data: ToyDataset,
    init_mode: str = "identity",
    sched: TrainingSchedule = TrainingSchedule(),
    steps: int = 10,
    seed: int = 0,
    sigma_w: float = 0.5,
) -> LossCurve:
    """Full-batch gradient descent with per-group learning rates.

    The spatial expert starts as the identity map (the "pre-trained"
    stage); ``steps`` updates are taken per epoch.
    """
    C = data.raw.shape[1]
    model = ToyModel(np.eye(C), np.zeros(C), init_fusion_weights(C, init_mode, seed, sigma_w))
    loss0, out0, *_ = toy_forward(model, data)
    rows, snaps = [], [_snapshot(model)]
    for epoch in range(1, sched.total_epochs + 1):
        lr = {g: lr_multiplier(g, epoch, sched) for g in ModuleGroup}
        for _ in range(steps):
            g = toy_gradients(model, data)
            if not math.isfinite(g["loss"]):
                raise Diverged(f"loss became {g['loss']} at epoch {epoch}; lower the learning rate")
            f = model.fusion
            lt = lr[ModuleGroup.TEMPORAL]
            if lt:
                model.fusion = _checked(FusionWeights, f.W_h - lt * g["W_h"], f.W_c - lt * g["W_c"], f.b - lt * g["b"], epoch)
            if lr[ModuleGroup.SPATIAL]:
                model.spatial = model.spatial - lr[ModuleGroup.SPATIAL] * g["spatial"]
            if lr[ModuleGroup.BACKBONE]:
                model.backbone = model.backbone - lr[ModuleGroup.BACKBONE] * g["backbone"]
        loss, out, *_ = toy_forward(model, data)
        if not math.isfinite(loss):
            raise Diverged(f"loss became {loss} at epoch {epoch}; lower the learning rate")
        rows.append((epoch, sched.phase(epoch), loss, proxy_quality(out, data.target)))
        snaps.append(_snapshot(model))
    return LossCurve(rows, loss0, model, proxy_quality(out0, data.target), snaps)


def _snapshot(model: ToyModel) -> dict:
    return {g: [np.array(a, copy=True) for a in arrs] for g, arrs in model.params().items()}


def _checked(cls, W_h, W_c, b, epoch):
    if not (np.all(np.isfinite(W_h)) and np.all(np.isfinite(W_c)) and np.all(np.isfinite(b))):
        raise Diverged(f"fusion weights overflowed at epoch {epoch}; lower the learning rate")
    return cls(W_h, W_c, b)


def toy_lipschitz(data: ToyDataset) -> float:
    """Largest Hessian eigenvalue of the toy loss in the fusion parameters."""
    Z = np.hstack([data.F_hist, data.raw, np.ones((len(data.raw), 1))])
    gram = 2.0 * Z.T @ Z / len(Z)
    return float(np.linalg.eigvalsh(gram)[-1])
