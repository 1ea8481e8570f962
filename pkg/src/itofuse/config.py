"""Pipeline configuration (JSON) and its validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import ItofNoiseSpec, SceneSpec, random_scene
from .errors import FormatError, ValidationError
from .fileio import rig_from_dict, rig_to_dict
from .fusionnet import FusionNetConfig
from .geometry import Camera, CameraRig, Distortion, Intrinsics, RigidTransform, rotation_z
from .optim import OptimizerConfig


def default_rig() -> CameraRig:
    """Desk-scale rig: 160x120 RGB (~70 deg HFoV) and a narrower 80x60 iToF, 5 cm baseline."""
    rgb = Camera(Intrinsics(114.0, 114.0, 79.5, 59.5, 160, 120), Distortion(k1=-0.04, k2=0.01))
    itof = Camera(Intrinsics(72.0, 72.0, 39.5, 29.5, 80, 60))
    return CameraRig(itof, rgb, RigidTransform(rotation_z(0.5), [0.05, 0.0, 0.0]))


@dataclass
class SceneSource:
    """Either an explicit list of scenes or a seeded procedural generator."""

    count: int = 72
    seed: int = 1000
    depth_range: tuple[float, float] = (1.0, 6.0)
    primitives: tuple[int, int] = (3, 6)
    explicit: list[SceneSpec] | None = None

    def scenes(self) -> list[SceneSpec]:
        if self.explicit is not None:
            return list(self.explicit)
        return [random_scene(self.seed + i, self.depth_range, self.primitives) for i in range(self.count)]

    def to_dict(self) -> dict:
        if self.explicit is not None:
            return {"explicit": [s.to_dict() for s in self.explicit]}
        return {"count": self.count, "seed": self.seed, "depth_range": list(self.depth_range),
                "primitives": list(self.primitives)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSource":
        if "explicit" in d:
            return cls(explicit=[SceneSpec.from_dict(s) for s in d["explicit"]])
        return cls(count=int(d.get("count", 72)), seed=int(d.get("seed", 1000)),
                   depth_range=tuple(d.get("depth_range", (1.0, 6.0))),
                   primitives=tuple(d.get("primitives", (3, 6))))


@dataclass
class PipelineConfig:
    rig: CameraRig = field(default_factory=default_rig)
    scenes: SceneSource = field(default_factory=SceneSource)
    split: float = 0.95
    noise: ItofNoiseSpec = field(default_factory=ItofNoiseSpec)
    model: FusionNetConfig = field(default_factory=FusionNetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValidationError(f"split must lie in (0, 1), got {self.split}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        step = 2 ** self.model.levels
        k = self.rig.rgb.intrinsics
        if k.width % step or k.height % step:
            raise ValidationError(f"RGB resolution {k.width}x{k.height} must be divisible by 2^levels = {step}")

    def split_counts(self, n: int) -> tuple[int, int]:
        n_val = max(1, int(round(n * (1.0 - self.split))))
        if n_val >= n:
            raise ValidationError(f"split {self.split} leaves no training scenes out of {n}")
        return n - n_val, n_val

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "split": self.split,
            "rig": rig_to_dict(self.rig),
            "scenes": self.scenes.to_dict(),
            "noise": self.noise.to_dict(),
            "model": self.model.to_dict(),
            "optimizer": {"kind": self.optimizer.kind, "lr": self.optimizer.lr,
                          "betas": list(self.optimizer.betas), "eps": self.optimizer.eps},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(
                rig=rig_from_dict(d["rig"]) if "rig" in d else default_rig(),
                scenes=SceneSource.from_dict(d.get("scenes", {})),
                split=float(d.get("split", 0.95)),
                noise=ItofNoiseSpec(**d.get("noise", {})),
                model=FusionNetConfig(**d.get("model", {})),
                optimizer=OptimizerConfig(**d.get("optimizer", {})),
                batch_size=int(d.get("batch_size", 4)),
                epochs=int(d.get("epochs", 40)),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ValidationError(f"unknown or malformed config field: {exc}") from None

    def config_hash(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return PipelineConfig.from_dict(raw)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
