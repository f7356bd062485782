"""Run configuration: TOML loading, validation and a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .optimizer import OptimizerConfig
from .pipeline import Toggles, TrackingConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


_PATH_KEYS = ("scenario_file", "observations", "images", "mesh", "t_init", "correspondences", "ground_truth",
              "gt_points")


@dataclass
class InputConfig:
    """Exactly one of ``scenario``/``scenario_file``, ``observations`` or ``images``."""

    scenario: Optional[str] = None  # builtin scenario name
    scenario_file: Optional[str] = None  # scenario spec (TOML or JSON)
    observations: Optional[str] = None  # observation log written by `simulate`
    images: Optional[str] = None  # directory of frames
    mesh: Optional[str] = None
    t_init: Optional[str] = None  # 12-number pose file
    correspondences: Optional[str] = None  # x,y,z,u,v CSV, registered to obtain T_init
    ground_truth: Optional[str] = None  # optional sidecar for metrics in log/image mode
    gt_points: Optional[str] = None
    intrinsics: Optional[dict] = None  # fx, fy, cx, cy, width, height (image mode)
    fps: float = 30.0  # image mode frame rate
    frontend: str = "observations"  # scenario mode: "observations" (feature ids) or "detector" (rendered images)
    render_images: bool = False  # scenario mode: attach rendered frames (needed for texturing)
    overrides: dict = field(default_factory=dict)  # scenario field overrides

    def source(self) -> str:
        chosen = [n for n in ("scenario", "scenario_file", "observations", "images") if getattr(self, n)]
        if len(chosen) != 1:
            raise ConfigError(f"exactly one input source required, got {chosen or 'none'}")
        name = chosen[0]
        if name in ("observations", "images"):
            if not self.mesh:
                raise ConfigError(f"input.{name} needs input.mesh")
            if not (self.t_init or self.correspondences):
                raise ConfigError(f"input.{name} needs input.t_init or input.correspondences")
        if name == "images" and not self.intrinsics:
            raise ConfigError("input.images needs input.intrinsics")
        if self.frontend not in ("observations", "detector"):
            raise ConfigError(f"input.frontend must be observations|detector, got {self.frontend!r}")
        return "scenario" if name == "scenario_file" else name


@dataclass
class RunConfig:
    input: InputConfig = field(default_factory=InputConfig)
    toggles: Toggles = field(default_factory=Toggles)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    out: str = "run"
    deterministic: bool = True  # False runs mapping on a worker thread
    tre_frames: int = 20

    def validate(self) -> "RunConfig":
        self.input.source()
        if self.tre_frames < 1:
            raise ConfigError("tre_frames must be >= 1")
        if self.tracking.texture not in ("keyframes", "frames", "off"):
            raise ConfigError(f"tracking.texture must be keyframes|frames|off, got {self.tracking.texture!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "input": dataclasses.asdict(self.input),
            "toggles": self.toggles.as_dict(),
            "tracking": dataclasses.asdict(self.tracking),
            "optimizer": dataclasses.asdict(self.optimizer),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "tre_frames": self.tre_frames,
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory is excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_toggle(self, name: str, value: bool) -> "RunConfig":
        if name not in Toggles.NAMES:
            raise ConfigError(f"unknown toggle {name!r}; expected one of {Toggles.NAMES}")
        toggles = dataclasses.replace(self.toggles, **{name: value})
        return dataclasses.replace(self, toggles=toggles)


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def run_config_from_dict(data: dict, base_dir=None) -> RunConfig:
    data = dict(data)
    top = {k: data.pop(k) for k in ("seed", "out", "deterministic", "tre_frames") if k in data}
    inp = dict(data.pop("input", {}))
    if base_dir is not None:
        for key in _PATH_KEYS:
            if inp.get(key):
                p = Path(inp[key])
                inp[key] = str(p if p.is_absolute() else (Path(base_dir) / p))
    cfg = RunConfig(
        input=_build(InputConfig, inp, "input"),
        toggles=_build(Toggles, data.pop("toggles", {}), "toggles"),
        tracking=_build(TrackingConfig, data.pop("tracking", {}), "tracking"),
        optimizer=_build(OptimizerConfig, data.pop("optimizer", {}), "optimizer"),
        **top,
    )
    if data:
        raise ConfigError(f"unknown sections: {', '.join(sorted(data))}")
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return run_config_from_dict(load_toml(path), path.parent)
