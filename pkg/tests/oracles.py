"""Independent reference implementations used by the tests.

Each oracle recomputes a quantity by a different route from the library:
plain numpy loops, scipy routines or brute-force search.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation


def gram_schmidt_frame(parent_limb: np.ndarray, face: np.ndarray) -> np.ndarray:
    a1 = parent_limb / np.linalg.norm(parent_limb)
    r = face - face.dot(a1) * a1
    a2 = r / np.linalg.norm(r)
    return np.column_stack([a1, a2, np.cross(a1, a2)])


def fk_oracle(v: np.ndarray, skeleton) -> np.ndarray:
    """Forward kinematics by explicit per-joint frame composition in numpy."""
    s = skeleton
    p = np.array(s.template_pose, dtype=np.float64)
    face = np.cross(p[s.lhip] - p[s.rhip], p[s.neck] - p[s.rhip])
    face /= np.linalg.norm(face)
    for j in s.articulated:
        par, gp = s.parents[j], s.parents[s.parents[j]]
        R = gram_schmidt_frame(p[par] - p[gp], face)
        p[j] = p[par] + s.limb_lengths[j] * R @ v[j]
    return p


def complex_similarity(r1, r2, q1, q2):
    """Similarity from two point pairs via the complex ratio ``(q2-q1)/(r2-r1)``."""
    zr1, zr2 = complex(*r1), complex(*r2)
    zq1, zq2 = complex(*q1), complex(*q2)
    z = (zq2 - zq1) / (zr2 - zr1)
    t = zq1 - z * zr1
    lin = np.array([[z.real, -z.imag], [z.imag, z.real]])
    return lin, np.array([t.real, t.imag])


def normal_equation_similarity(r: np.ndarray, q: np.ndarray):
    """Least-squares ``q ~ [[a,-b],[b,a]] r + t`` by solving the 4x4 normal equations."""
    rows, rhs = [], []
    for (x, y), (u, w) in zip(r, q):
        rows.append([x, -y, 1.0, 0.0])
        rhs.append(u)
        rows.append([y, x, 0.0, 1.0])
        rhs.append(w)
    A, b = np.array(rows), np.array(rhs)
    a, bb, tx, ty = np.linalg.solve(A.T @ A, A.T @ b)
    return np.array([[a, -bb], [bb, a]]), np.array([tx, ty])


def _to_pixel(u, size):
    return (u + 1.0) * size / 2.0 - 0.5


def warp_oracle(canonical: np.ndarray, lin: np.ndarray, trans: np.ndarray, size: int, order: int = 3) -> np.ndarray:
    """Per-pixel inverse warp of one map with scipy spline interpolation.

    For every output pixel centre, map back through the inverse similarity
    and read the zero-extended canonical map there. The map is padded
    generously so the spline prefilter sees a zero background.
    """
    inv = np.linalg.inv(lin)
    pad = 24
    big = np.pad(canonical, pad)
    H = canonical.shape[0]
    rows, cols = np.empty(size * size), np.empty(size * size)
    for i in range(size):
        for k in range(size):
            u = np.array([(k + 0.5) * 2.0 / size - 1.0, (i + 0.5) * 2.0 / size - 1.0])
            px = _to_pixel(inv @ (u - trans), H)
            rows[i * size + k], cols[i * size + k] = px[1] + pad, px[0] + pad
    vals = ndimage.map_coordinates(big, [rows, cols], order=order, mode="constant", cval=0.0)
    return vals.reshape(size, size)


def part_similarities_oracle(anchors: np.ndarray, q: np.ndarray, skeleton):
    """Per-limb similarity: complex ratio for two anchors, normal equations for more."""
    out = []
    for limb in skeleton.limbs:
        idx = list(limb.joints)
        if len(idx) == 2:
            out.append(complex_similarity(anchors[idx[0]], anchors[idx[1]], q[idx[0]], q[idx[1]]))
        else:
            out.append(normal_equation_similarity(anchors[idx], q[idx]))
    return out


def gaussian_conv_oracle(img: np.ndarray, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur by explicit 1D convolutions with zero padding."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, radius)
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, rows)


def rotation_grid_procrustes(P: np.ndarray, Q: np.ndarray, step_deg: float = 0.1, refine: int = 3):
    """Brute-force similarity fit: dense rotation search plus least-squares scale and shift.

    A coarse grid over rotation vectors is refined around the best cell
    ``refine`` times, ending at ``step_deg`` resolution. For each rotation
    the optimal scale and translation are closed-form. Returns the residual
    (sum of squared errors) at the best rotation.
    """
    Pc, Qc = P - P.mean(0), Q - Q.mean(0)

    def residual(R):
        RP = Pc @ R.T
        s = max(float((RP * Qc).sum() / (RP * RP).sum()), 0.0)
        return float(((s * RP - Qc) ** 2).sum())

    # coarse: uniform samples over SO(3)
    coarse = Rotation.random(20000, random_state=0)
    best = min(coarse, key=lambda r: residual(r.as_matrix()))
    width = np.deg2rad(10.0)
    final = np.deg2rad(step_deg)
    for level in range(refine + 1):
        n = 7
        offsets = np.linspace(-width, width, n)
        grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), -1).reshape(-1, 3)
        cands = [Rotation.from_rotvec(g) * best for g in grid]
        best = min(cands, key=lambda r: residual(r.as_matrix()))
        width = max(width / 3.0, final)
    return residual(best.as_matrix())
