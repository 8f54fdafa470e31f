"""Restricted extrinsics and fixed-intrinsic perspective projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BehindCameraError, ConfigError, InvalidInputError
from .geometry import as_tensor, default_skeleton, template_positions

DEFAULT_FOCAL = 1.2


@dataclass(frozen=True)
class CameraBounds:
    """Box bounds on the six extrinsic parameters.

    Angles are ``(rz, ry, rx)`` in radians, composed as ``Rz @ Ry @ Rx``.
    """

    angle_low: tuple = (-math.pi, -math.pi, -math.pi)
    angle_high: tuple = (math.pi, math.pi, math.pi)
    t_low: tuple = (-0.5, -0.5, 2.5)
    t_high: tuple = (0.5, 0.5, 5.0)
    z_min: float = 0.5
    margin: float = 0.05

    def __post_init__(self):
        if not self.z_min > 0:
            raise ConfigError("camera z_min must be positive")
        if self.t_low[2] < self.z_min:
            raise ConfigError("translation z lower bound must be >= z_min")
        if not 0 <= self.margin < 1:
            raise ConfigError("camera margin must lie in [0, 1)")
        for lo, hi in zip(self.angle_low + self.t_low, self.angle_high + self.t_high):
            if lo > hi:
                raise ConfigError("camera bound has low > high")

    @property
    def low(self) -> np.ndarray:
        return np.array(self.angle_low + self.t_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.angle_high + self.t_high, dtype=np.float64)


# upright views: camera y points down the body, azimuth free, mild tilt/roll
UPRIGHT_BOUNDS = CameraBounds(
    angle_low=(-0.15, -math.pi, math.pi / 2 - 0.3),
    angle_high=(0.15, math.pi, math.pi / 2 + 0.2),
    t_low=(-0.15, -0.15, 3.5),
    t_high=(0.15, 0.15, 4.5),
)


@dataclass(frozen=True)
class CameraParams:
    """Extrinsics as a 6-vector ``(rz, ry, rx, tx, ty, tz)``; may be batched."""

    vector: torch.Tensor = field(default_factory=lambda: torch.tensor([0.0, 0.0, 0.0, 0.0, 0.0, 3.0], dtype=torch.float64))

    def __post_init__(self):
        v = as_tensor(self.vector)
        if v.shape[-1] != 6:
            raise InvalidInputError("camera vector must have 6 components")
        object.__setattr__(self, "vector", v)

    @classmethod
    def make(cls, rotation=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 3.0)) -> "CameraParams":
        return cls(torch.cat([as_tensor(rotation), as_tensor(translation)], dim=-1))

    @property
    def rotation(self) -> torch.Tensor:
        return self.vector[..., :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.vector[..., 3:]

    def matrix(self) -> torch.Tensor:
        return rotation_matrix(self.rotation)

    def tolist(self) -> list:
        return self.vector.detach().cpu().tolist()


def rotation_matrix(angles) -> torch.Tensor:
    """``Rz(a[0]) @ Ry(a[1]) @ Rx(a[2])`` for ``(..., 3)`` angles."""
    a = as_tensor(angles)
    cz, sz = torch.cos(a[..., 0]), torch.sin(a[..., 0])
    cy, sy = torch.cos(a[..., 1]), torch.sin(a[..., 1])
    cx, sx = torch.cos(a[..., 2]), torch.sin(a[..., 2])
    rows = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
    return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)


def camera_points(p, cam: CameraParams) -> torch.Tensor:
    p = as_tensor(p)
    R = cam.matrix().to(p.dtype)
    t = cam.translation.to(p.dtype)
    return p @ R.transpose(-1, -2) + t.unsqueeze(-2)


def project(p, cam: CameraParams, f: float = DEFAULT_FOCAL, z_eps: float = 1e-6, check: bool = True):
    """Perspective projection of canonical joints.

    Returns
    -------
    q : (..., J, 2) image-normalized coordinates, ``f * (x/z, y/z)``.
    q_d : (..., J) camera-frame depths (``z``, no perspective applied).
    """
    X = camera_points(p, cam)
    z = X[..., 2]
    if check and bool((z <= z_eps).any()):
        raise BehindCameraError("a joint lies on or behind the camera plane")
    if not check:
        z = z.clamp_min(z_eps)
    q = f * X[..., :2] / z.unsqueeze(-1)
    return q, z


def clamp_in_frame(cam: CameraParams, p, bounds: CameraBounds = CameraBounds(), f: float = DEFAULT_FOCAL) -> CameraParams:
    """Nearest camera that frames every joint inside ``[-1+m, 1-m]^2``.

    Each component is clamped to its box, then ``tz`` is raised by the
    smallest amount that brings all joints into the margin and at least
    ``z_min`` in front of the camera. Raises ``ConfigError`` if that needs
    ``tz`` beyond its upper bound.
    """
    p = as_tensor(p).detach()
    v = cam.vector.detach().clone()
    lo = torch.as_tensor(bounds.low, dtype=v.dtype)
    hi = torch.as_tensor(bounds.high, dtype=v.dtype)
    v = torch.minimum(torch.maximum(v, lo), hi)
    X = camera_points(p, CameraParams(v))
    lim = 1.0 - bounds.margin
    need = torch.stack(
        [f * X[..., 0].abs() / lim - X[..., 2], f * X[..., 1].abs() / lim - X[..., 2], bounds.z_min - X[..., 2]],
        dim=-1,
    ).amax(dim=(-1, -2))
    delta = torch.where(need > 0, need + 1e-12, torch.zeros_like(need))
    v[..., 5] = v[..., 5] + delta
    if bool((v[..., 5] > hi[5] + 1e-12).any()):
        raise ConfigError("translation z bound too small to frame every joint")
    return CameraParams(v)


def in_frame(cam: CameraParams, p, bounds: CameraBounds = CameraBounds(), f: float = DEFAULT_FOCAL, tol: float = 1e-9) -> bool:
    q, z = project(p, cam, f, check=False)
    return bool((q.abs() <= 1 - bounds.margin + tol).all() and (z >= bounds.z_min - tol).all())


def sample_camera(rng: np.random.Generator, bounds: CameraBounds = CameraBounds(), p=None,
                  f: float = DEFAULT_FOCAL, max_tries: int = 1000) -> CameraParams:
    """Uniform draw inside ``bounds`` followed by :func:`clamp_in_frame`.

    Draws whose framing would need ``tz`` above its bound are rejected and
    redrawn, so the result is deterministic given the generator state.
    """
    if p is None:
        p = template_positions(default_skeleton())
    for _ in range(max_tries):
        v = rng.uniform(bounds.low, bounds.high)
        try:
            return clamp_in_frame(CameraParams(torch.from_numpy(v)), p, bounds, f)
        except ConfigError:
            continue
    raise ConfigError("could not sample a framing camera within bounds")
