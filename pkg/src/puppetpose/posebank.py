"""Procedural generator of plausible world-space poses (a stand-in MoCap bank)."""

from __future__ import annotations

import numpy as np

from .geometry import Skeleton, default_skeleton

MM_PER_UNIT = 480.0


def _unit(v):
    return v / np.linalg.norm(v)


def _rotate(v, axis, angle):
    axis = _unit(axis)
    return v * np.cos(angle) + np.cross(axis, v) * np.sin(angle) + axis * (axis @ v) * (1 - np.cos(angle))


def _leg(rng, side):
    hip = np.radians(np.clip(rng.normal(15, 30), -35, 95))
    abd = np.radians(rng.uniform(-5, 25))
    knee = np.radians(rng.uniform(0, 1.0) ** 1.5 * 115)
    thigh = _unit(np.array([np.sin(hip) * np.cos(abd), side * np.sin(abd), -np.cos(hip) * np.cos(abd)]))
    shin = _unit(np.array([np.sin(hip - knee) * np.cos(abd), side * np.sin(abd), -np.cos(hip - knee) * np.cos(abd)]))
    return thigh, shin


def _arm(rng, side):
    elev = np.radians(rng.uniform(5, 150))
    az = np.radians(rng.uniform(-40, 110))
    upper = _unit(np.array([np.sin(elev) * np.sin(az), side * np.sin(elev) * np.cos(az), -np.cos(elev)]))
    axis = np.cross(upper, rng.normal(size=3))
    fore = _rotate(upper, axis, np.radians(rng.uniform(0, 130)))
    return upper, _unit(fore)


def _head(rng):
    nose = _unit(np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.15, size=3) + np.array([0.1, 0, 0]))
    head = _unit(nose + rng.normal(scale=0.15, size=3))
    return nose, head


def canonical_pose(rng: np.random.Generator, skeleton: Skeleton | None = None, min_sine: float = 0.3) -> np.ndarray:
    """One canonical pose with the skeleton's bone lengths.

    Limb directions whose child frame would be nearly parallel to the
    face-vector (sine below ``min_sine``) are redrawn.
    """
    s = skeleton or default_skeleton()
    ix = s.index
    face = np.array([1.0, 0.0, 0.0])
    while True:
        dirs = {}
        dirs["lknee"], dirs["lankle"] = _leg(rng, +1)
        dirs["rknee"], dirs["rankle"] = _leg(rng, -1)
        dirs["lelbow"], dirs["lwrist"] = _arm(rng, +1)
        dirs["relbow"], dirs["rwrist"] = _arm(rng, -1)
        dirs["nose"], dirs["head"] = _head(rng)
        dirs["lshoulder"] = _unit(np.array([0.0, 1.0, 0.0]) + rng.normal(scale=0.1, size=3) * [0.5, 0, 1])
        dirs["rshoulder"] = _unit(np.array([0.0, -1.0, 0.0]) + rng.normal(scale=0.1, size=3) * [0.5, 0, 1])
        parents_of = {"lankle": "lknee", "rankle": "rknee", "lwrist": "lelbow", "rwrist": "relbow", "head": "nose"}
        if all(np.linalg.norm(np.cross(dirs[p], face)) >= min_sine for p in parents_of.values()):
            break
    p = s.template_pose.copy()
    for j in s.articulated:
        name = s.joints[j]
        p[j] = p[s.parents[j]] + s.limb_lengths[j] * dirs[name]
    return p


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def synthesize_world_poses(rng: np.random.Generator, n: int, skeleton: Skeleton | None = None) -> np.ndarray:
    """``n`` poses in millimetres under random rigid motions, ``(n, J, 3)``."""
    s = skeleton or default_skeleton()
    out = np.empty((n, s.J, 3))
    for i in range(n):
        p = canonical_pose(rng, s) * MM_PER_UNIT * rng.uniform(0.9, 1.1)
        R = random_rotation(rng)
        out[i] = p @ R.T + rng.uniform(-2000, 2000, size=3)
    return out
