"""Run configuration: JSON blocks validated into frozen dataclasses.

Unknown keys and out-of-range values raise ``ConfigError`` before any
compute starts.  ``--set a.b=value`` overrides are applied to the raw
JSON tree first; ``OCC_SEED`` overrides the global seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError, SgrOccError
from .geometry import CameraIntrinsics, VoxelGridSpec
from .lifter import LIFT_MODES, GateParams, LiftMode, SampleConfig
from .memory import ConfidenceParams, MemoryConfig
from .refiner import GRM_KINDS, RAY_FITS, REFINE_MODES, GrmStrategy, default_kappa
from .scene_sim import RoomSpec, SemanticClass, TrajectorySpec


@dataclass(frozen=True)
class SceneCfg:
    seed: int | None = None
    size: tuple = (4.8, 4.8, 2.88)
    n_objects: int = 6
    thickness: float = 0.08
    clear_radius: float = 1.4

    def room(self) -> RoomSpec:
        return RoomSpec(size=tuple(self.size), thickness=self.thickness, n_objects=self.n_objects, clear_radius=self.clear_radius)


@dataclass(frozen=True)
class TrajectoryCfg:
    n_frames: int = 30
    center: tuple = (2.4, 2.4, 1.4)
    radius: float = 1.0
    start_angle: float = 0.0
    arc: float = 2 * math.pi
    target: tuple | None = (2.4, 2.4, 0.6)

    def spec(self) -> TrajectorySpec:
        return TrajectorySpec(self.n_frames, tuple(self.center), self.radius, self.start_angle, self.arc,
                              None if self.target is None else tuple(self.target))


@dataclass(frozen=True)
class CameraCfg:
    width: int = 128
    height: int = 96
    fx: float = 100.0
    fy: float = 100.0
    cx: float | None = None
    cy: float | None = None
    local_frame: int = 0
    trajectory: TrajectoryCfg = field(default_factory=TrajectoryCfg)

    def intrinsics(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2 if self.cx is None else self.cx
        cy = (self.height - 1) / 2 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)


@dataclass(frozen=True)
class NoiseCfg:
    depth_sigma: float = 0.0
    pose_frac: float = 0.0


@dataclass(frozen=True)
class LifterCfg:
    mode: str = "soft_gating"
    K: int = 16
    pattern: str = "ring"
    radius: float = 2.0
    alpha: float = 1.0
    sigma: float = 0.5
    tau: float = 0.5
    normalize_gate: bool = False


@dataclass(frozen=True)
class RefinerCfg:
    mode: str = "ray"
    delta_max: float = 0.24
    iterations: int = 1
    ray_fit: str = "snap"
    grm: str = "semantic_adaptive"
    grm_weight: float = 0.5
    kappa: dict | None = None
    grm_steps: int = 100
    grm_lr: float = 0.01
    grm_radius: float = 0.16
    normals: str = "gt"


@dataclass(frozen=True)
class MemoryCfg:
    sigma_geo: float = 0.5
    T: float = 0.5
    tau_min: float = 0.2
    tau_max: float = 0.8
    max_pool: int = 50_000
    stride: int = 2
    anchor_scale: float = 0.04


@dataclass(frozen=True)
class ScheduleCfg:
    total_epochs: int = 15
    phase1_end: int = 5
    base_lr: float = 1e-4
    warmup_epochs: int = 0
    cosine: bool = False


@dataclass(frozen=True)
class FusionCfg:
    init: str = "identity"
    sigma_w: float = 0.5


@dataclass(frozen=True)
class EvalCfg:
    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = (60, 60, 36)
    resolution: float = 0.08
    theta_occ: float = 0.25
    snapshot_every: int = 5

    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(self.origin), tuple(self.dims), self.resolution)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    scene: SceneCfg = field(default_factory=SceneCfg)
    camera: CameraCfg = field(default_factory=CameraCfg)
    noise: NoiseCfg = field(default_factory=NoiseCfg)
    lifter: LifterCfg = field(default_factory=LifterCfg)
    refiner: RefinerCfg = field(default_factory=RefinerCfg)
    memory: MemoryCfg = field(default_factory=MemoryCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    fusion: FusionCfg = field(default_factory=FusionCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    # --- derived objects -------------------------------------------------
    @property
    def scene_seed(self) -> int:
        return self.seed if self.scene.seed is None else self.scene.seed

    def gate(self) -> GateParams:
        return GateParams(self.lifter.alpha, self.lifter.sigma)

    def lift_mode(self) -> LiftMode:
        return LiftMode(self.lifter.mode, self.lifter.tau)

    def samples(self) -> SampleConfig:
        return SampleConfig(self.lifter.K, self.lifter.pattern, self.lifter.radius, self.lifter.normalize_gate)

    def grm(self) -> GrmStrategy:
        kappa = default_kappa()
        for k, v in (self.refiner.kappa or {}).items():
            kappa[_class_code(k)] = float(v)
        return GrmStrategy(self.refiner.grm, self.refiner.grm_weight, kappa)

    def memory_cfg(self) -> MemoryConfig:
        m = self.memory
        return MemoryConfig(ConfidenceParams(m.sigma_geo, m.T, m.tau_min, m.tau_max), m.max_pool, m.stride, m.anchor_scale,
                            cover_radius=self.eval.resolution)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, **dotted) -> RunConfig:
        tree = self.to_dict()
        for k, v in dotted.items():
            _assign(tree, k.replace("__", "."), v)
        return from_dict(tree)


def _class_code(k) -> int:
    if isinstance(k, str) and not k.isdigit():
        try:
            return int(SemanticClass[k.upper()])
        except KeyError:
            raise ConfigError(f"unknown class {k!r} in refiner.kappa") from None
    return int(k)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}; valid keys: {sorted(names)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    try:
        cfg = _build(RunConfig, data, "")
    except TypeError as e:
        raise ConfigError(str(e)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    """Range checks; instantiating the domain objects reuses their own validation."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed must be a non-negative integer")
    need(cfg.lifter.mode in LIFT_MODES, f"lifter.mode must be one of {LIFT_MODES}")
    need(cfg.refiner.mode in REFINE_MODES, f"refiner.mode must be one of {REFINE_MODES}")
    need(cfg.refiner.grm in GRM_KINDS, f"refiner.grm must be one of {GRM_KINDS}")
    need(cfg.refiner.normals in ("gt", "from_depth"), "refiner.normals must be 'gt' or 'from_depth'")
    need(cfg.refiner.ray_fit in RAY_FITS, f"refiner.ray_fit must be one of {RAY_FITS}")
    need(cfg.refiner.grm_radius > 0, "refiner.grm_radius must be positive")
    need(0 < cfg.refiner.delta_max, "refiner.delta_max must be positive")
    need(cfg.refiner.iterations >= 0 and cfg.refiner.grm_steps >= 0, "iteration counts must be >= 0")
    need(cfg.lifter.K >= 1, "lifter.K must be >= 1")
    need(0 <= cfg.noise.depth_sigma, "noise.depth_sigma must be >= 0")
    need(0 <= cfg.noise.pose_frac <= 0.2, "noise.pose_frac must lie in [0, 0.2]")
    need(0 < cfg.eval.theta_occ, "eval.theta_occ must be positive")
    need(cfg.eval.snapshot_every >= 1, "eval.snapshot_every must be >= 1")
    res = cfg.eval.resolution
    need(0.5 * res <= cfg.memory.anchor_scale <= 4 * res, "memory.anchor_scale must lie in [0.5, 4] x eval.resolution")
    need(cfg.fusion.init in ("identity", "random"), "fusion.init must be 'identity' or 'random'")
    try:
        cfg.scene.room()
        cfg.camera.intrinsics()
        cfg.camera.trajectory.spec()
        cfg.gate()
        cfg.lift_mode()
        cfg.samples().resolve()
        cfg.grm()
        cfg.memory_cfg()
        cfg.eval.grid()
        from .fusion import TrainingSchedule

        s = cfg.schedule
        TrainingSchedule(s.total_epochs, s.phase1_end, s.base_lr, warmup_epochs=s.warmup_epochs, cosine=s.cosine)
    except SgrOccError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    need(0 <= cfg.camera.local_frame < cfg.camera.trajectory.n_frames, "camera.local_frame must index a trajectory frame")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _assign(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[k]
        if node is None:
            raise ConfigError(f"cannot set {dotted!r}: parent is null")
    if not isinstance(node, dict) or (keys[-1] not in node and not dotted.startswith("refiner.kappa.")):
        raise ConfigError(f"unknown config path {dotted!r}")
    node[keys[-1]] = value


def apply_overrides(tree: dict, sets: list[str]) -> dict:
    for s in sets:
        if "=" not in s:
            raise ConfigError(f"override {s!r} is not of the form key=value")
        k, v = s.split("=", 1)
        _assign(tree, k.strip(), parse_value(v.strip()))
    return tree


def load_config(path: str | Path | None = None, sets: list[str] = (), env=None) -> RunConfig:
    """Load a JSON config (``None`` means the packaged bench room)."""
    env = os.environ if env is None else env
    if path is None:
        text = resources.files("sgrocc.data").joinpath("bench_room.json").read_text()
    elif isinstance(path, str) and not Path(path).exists() and resources.files("sgrocc.data").joinpath(path).is_file():
        text = resources.files("sgrocc.data").joinpath(path).read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path or 'bench_room.json'} is not valid JSON: {e}") from None
    tree = RunConfig().to_dict()
    _merge(tree, raw, "")
    apply_overrides(tree, list(sets))
    if env.get("OCC_SEED") not in (None, ""):
        try:
            tree["seed"] = int(env["OCC_SEED"])
        except ValueError:
            raise ConfigError(f"OCC_SEED must be an integer, got {env['OCC_SEED']!r}") from None
    return from_dict(tree)


def _merge(base: dict, new: dict, path: str):
    if not isinstance(new, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "kappa":
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
