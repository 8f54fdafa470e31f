"""Typed defaults for every tunable in the package.

Keys are addressed as ``section.field`` (``camera.f``, ``loss.beta``); camera
bounds live under ``camera.bounds.*``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .camera import CameraBounds, UPRIGHT_BOUNDS


@dataclass
class CameraConfig:
    f: float = 1.2
    margin: float = 0.05
    z_min: float = 0.5
    angle_low: tuple = (-math.pi, -math.pi, -math.pi)
    angle_high: tuple = (math.pi, math.pi, math.pi)
    t_low: tuple = (-0.5, -0.5, 2.5)
    t_high: tuple = (0.5, 0.5, 5.0)

    def bounds(self) -> CameraBounds:
        return CameraBounds(tuple(self.angle_low), tuple(self.angle_high), tuple(self.t_low),
                            tuple(self.t_high), self.z_min, self.margin)


@dataclass
class PuppetConfig:
    canvas: int = 128
    tau: float = 0.1
    normalize_depth: bool = True
    erosion_radius: int = 2
    blur_sigma: float = 1.5
    s_min: float = 0.05
    sampling: str = "bspline"


@dataclass
class LossConfig:
    beta: float = 0.5
    bg_color: tuple = (0.5, 0.5, 0.5)


@dataclass
class FitConfig:
    max_iters: int = 500
    lr: float = 0.02
    restarts: int = 5
    mode: str = "image"
    prior_weight: float = 0.0
    tol: float = 1e-10
    patience: int = 60
    optimizer: str = "lbfgs"
    history: int = 20
    image_loss: str = "l2"


@dataclass
class SelfSupConfig:
    corpus_size: int = 2000
    heldout: int = 200
    steps: int = 2000
    batch: int = 8
    resolution: int = 64
    lr_consistency: float = 1e-2
    lr_energy: float = 1e-2
    appearance_channels: int = 8
    appearance_grid: int = 8
    width: int = 32
    augment: bool = True
    pose_spread: float = 0.35
    # upright views within 1 rad of frontal: a randomly coloured puppet seen
    # from the back is indistinguishable from a mirrored front view
    angle_low: tuple = (UPRIGHT_BOUNDS.angle_low[0], math.pi / 2 - 1.0, UPRIGHT_BOUNDS.angle_low[2])
    angle_high: tuple = (UPRIGHT_BOUNDS.angle_high[0], math.pi / 2 + 1.0, UPRIGHT_BOUNDS.angle_high[2])
    t_low: tuple = UPRIGHT_BOUNDS.t_low
    t_high: tuple = UPRIGHT_BOUNDS.t_high
    log_every: int = 100

    def camera_bounds(self, cam: CameraConfig) -> CameraBounds:
        return CameraBounds(tuple(self.angle_low), tuple(self.angle_high), tuple(self.t_low),
                            tuple(self.t_high), cam.z_min, cam.margin)


@dataclass
class MetricsConfig:
    pck_threshold_mm: float = 150.0
    mm_per_unit: float = 480.0
    auc_steps: int = 31

    @property
    def pck_threshold(self) -> float:
        return self.pck_threshold_mm / self.mm_per_unit


@dataclass
class GradcheckConfig:
    eps: float = 1e-5
    tol: float = 1e-4
    points: int = 20


@dataclass
class Config:
    camera: CameraConfig = field(default_factory=CameraConfig)
    puppet: PuppetConfig = field(default_factory=PuppetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    selfsup: SelfSupConfig = field(default_factory=SelfSupConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    # ``camera.bounds.t_low`` is an alias of ``camera.t_low``
    ALIASES = {"camera.bounds.": "camera."}

    @classmethod
    def resolve(cls, key: str) -> tuple[str, str]:
        for prefix, repl in cls.ALIASES.items():
            if key.startswith(prefix):
                key = repl + key[len(prefix):]
        section, _, name = key.partition(".")
        return section, name

    def keys(self) -> list[str]:
        out = []
        for sec in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, sec.name)):
                out.append(f"{sec.name}.{f.name}")
        return out

    def get(self, key: str):
        section, name = self.resolve(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, value) -> None:
        section, name = self.resolve(key)
        setattr(getattr(self, section), name, value)

    def field_type(self, key: str):
        section, name = self.resolve(key)
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            return None
        for f in dataclasses.fields(sec):
            if f.name == name:
                return type(getattr(sec, name))
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
