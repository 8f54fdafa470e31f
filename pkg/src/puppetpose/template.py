"""Procedural drawing of the shipped puppet template.

The label map is painted from the skeleton's template pose seen from the
front under an orthographic camera: capsules for the limbs, an ellipse for
the head and a trapezoid for the torso. Anchors are the projected joints.
"""

from __future__ import annotations

import numpy as np

from .geometry import Skeleton, default_skeleton

# capsule radii and distal overhang (hands, feet), canonical units
PART_SHAPES = {
    "l_upper_arm": (0.13, 0.0),
    "r_upper_arm": (0.13, 0.0),
    "l_lower_arm": (0.11, 0.10),
    "r_lower_arm": (0.11, 0.10),
    "l_upper_leg": (0.19, 0.0),
    "r_upper_leg": (0.19, 0.0),
    "l_lower_leg": (0.15, 0.08),
    "r_lower_leg": (0.15, 0.08),
}
PAINT_ORDER = ("torso", "head", "l_upper_leg", "r_upper_leg", "l_lower_leg", "r_lower_leg",
               "l_upper_arm", "r_upper_arm", "l_lower_arm", "r_lower_arm")


def frontal_pixels(points: np.ndarray, canvas: int, scale: float, center_z: float) -> np.ndarray:
    """Canonical (Y, Z) to pixel (x, y): the body's left ends up on the image right."""
    c = canvas / 2.0
    x = c + scale * points[..., 1] - 0.5
    y = c - scale * (points[..., 2] - center_z) - 0.5
    return np.stack([x, y], axis=-1)


def _capsule(xx, yy, a, b, r):
    d = b - a
    t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / max(d @ d, 1e-12), 0.0, 1.0)
    px, py = a[0] + t * d[0], a[1] + t * d[1]
    return (xx - px) ** 2 + (yy - py) ** 2 <= r * r


def _convex_polygon(xx, yy, pts):
    n = len(pts)
    crosses = [(pts[(k + 1) % n][0] - pts[k][0]) * (yy - pts[k][1]) - (pts[(k + 1) % n][1] - pts[k][1]) * (xx - pts[k][0])
               for k in range(n)]
    c = np.stack(crosses)
    return (c >= 0).all(axis=0) | (c <= 0).all(axis=0)


def draw_template(skeleton: Skeleton | None = None, canvas: int = 128, scale: float = 30.0,
                  center_z: float = -0.17):
    """Return ``(label_map, anchors)``.

    ``label_map`` is ``canvas x canvas`` uint8 with 0 for background and
    ``l + 1`` for limb ``l``; ``anchors`` maps joint name to pixel ``(x, y)``.
    """
    s = skeleton or default_skeleton()
    tp = s.template_pose
    px = frontal_pixels(tp, canvas, scale, center_z)
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    label = np.zeros((canvas, canvas), dtype=np.uint8)
    limb_index = {limb.id: l for l, limb in enumerate(s.limbs)}
    for name in PAINT_ORDER:
        l = limb_index[name]
        limb = s.limbs[l]
        if name == "torso":
            corners = np.array([[0.0, -0.36, 1.06], [0.0, 0.36, 1.06], [0.0, 0.33, -0.12], [0.0, -0.33, -0.12]])
            pts = frontal_pixels(corners, canvas, scale, center_z)
            mask = _convex_polygon(xx, yy, pts)
        elif name == "head":
            a, b = tp[limb.joints[0]], tp[limb.joints[1]]
            centre = frontal_pixels((a + b) / 2.0 + np.array([0.0, 0.0, 0.02]), canvas, scale, center_z)
            ry, rx = 0.25 * scale, 0.19 * scale
            mask = ((xx - centre[0]) / rx) ** 2 + ((yy - centre[1]) / ry) ** 2 <= 1.0
        else:
            radius, overhang = PART_SHAPES[name]
            a, b = tp[limb.joints[0]], tp[limb.joints[1]]
            d = (b - a) / np.linalg.norm(b - a)
            b = b + overhang * d
            pa, pb = frontal_pixels(np.stack([a, b]), canvas, scale, center_z)
            mask = _capsule(xx, yy, pa, pb, radius * scale)
        label[mask] = l + 1
    anchors = {s.joints[j]: px[j].tolist() for limb in s.limbs for j in limb.joints}
    return label, anchors
