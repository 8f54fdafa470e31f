"""Joint-anchored part maps: dictionary, similarity warps, depth-aware compositing.

Image-plane points use normalized coordinates in ``[-1, 1]^2`` with pixel
centres at ``(i + 0.5) * 2 / W - 1`` (the ``align_corners=False`` convention
of :func:`torch.nn.functional.grid_sample`); ``y`` grows downwards.
Maps are channel-first: ``(..., L, H, W)``.

Warps sample the canonical maps either bilinearly or with an interpolating
cubic B-spline. Both reproduce the canonical maps exactly at texel centres;
the B-spline is twice continuously differentiable in the sample position,
so finite differences of a warped map agree with its gradient even when
samples move across texel boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .camera import CameraParams, project
from .config import PuppetConfig
from .diffcore import nondifferentiable
from .errors import InvalidInputError, TemplateError
from .geometry import Skeleton, as_tensor, default_skeleton


def pixel_to_norm(px, size: int):
    return (np.asarray(px, dtype=np.float64) + 0.5) * 2.0 / size - 1.0


def norm_to_pixel(u, size: int):
    return (u + 1.0) * size / 2.0 - 0.5


def pixel_grid(size: int, dtype=torch.float64) -> torch.Tensor:
    """(size, size, 2) normalized ``(x, y)`` coordinates of pixel centres."""
    c = (torch.arange(size, dtype=dtype) + 0.5) * 2.0 / size - 1.0
    yy, xx = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


@dataclass(frozen=True, eq=False)
class PartDictionary:
    """Canonical part maps, uncertainty maps and joint anchors.

    ``anchors`` holds one normalized 2D point per skeleton joint (NaN for
    joints that anchor no part).
    """

    phi: torch.Tensor
    psi: torch.Tensor
    anchors: torch.Tensor
    skeleton: Skeleton
    coef: torch.Tensor | None = None

    @cached_property
    def table(self) -> torch.Tensor:
        """Zero-ringed spline coefficients ready for :func:`sample_bspline`."""
        return spline_table(self.coef)

    def __post_init__(self):
        if self.coef is None:
            maps = np.stack([self.phi.detach().cpu().numpy(), self.psi.detach().cpu().numpy()], axis=1)
            object.__setattr__(self, "coef", torch.from_numpy(spline_coefficients(maps)).to(self.phi.dtype))

    @property
    def L(self) -> int:
        return self.phi.shape[0]

    @property
    def size(self) -> int:
        return self.phi.shape[-1]

    def limb_anchors(self, l: int) -> torch.Tensor:
        return self.anchors[list(self.skeleton.limbs[l].joints)]

    def to(self, dtype) -> "PartDictionary":
        return PartDictionary(self.phi.to(dtype), self.psi.to(dtype), self.anchors.to(dtype), self.skeleton,
                              self.coef.to(dtype))


SPLINE_PAD = 2
_SPLINE_MARGIN = 16


def spline_coefficients(maps: np.ndarray) -> np.ndarray:
    """Interpolating cubic B-spline coefficients of zero-extended maps.

    ``maps`` is ``(..., H, W)``; the result is ``(..., H + 4, W + 4)``: the
    coefficients of the canvas plus a two-texel ring (enough for every tap
    a sample inside the canvas can reach). Coefficients further out are
    treated as zero.
    """
    maps = np.asarray(maps, dtype=np.float64)
    lead = maps.shape[:-2]
    flat = maps.reshape(-1, *maps.shape[-2:])
    m, p = _SPLINE_MARGIN, SPLINE_PAD
    out = []
    for img in flat:
        big = np.pad(img, m)
        c = ndimage.spline_filter(big, order=3, mode="mirror")
        out.append(c[m - p : c.shape[0] - m + p, m - p : c.shape[1] - m + p])
    return np.stack(out).reshape(*lead, maps.shape[-2] + 2 * p, maps.shape[-1] + 2 * p)


def _bspline_basis(t: torch.Tensor) -> torch.Tensor:
    """Cubic B-spline weights of the taps at offsets -1, 0, 1, 2; shape ``(..., 4)``."""
    t2, t3 = t * t, t * t * t
    return torch.stack([(1 - t) ** 3, 3 * t3 - 6 * t2 + 4, -3 * t3 + 3 * t2 + 3 * t + 1, t3], dim=-1) / 6.0


_TABLE_RING = 4


def spline_table(coef: torch.Tensor) -> torch.Tensor:
    """Pad coefficients with a zero ring so clamped samples never need masking."""
    return F.pad(coef, (_TABLE_RING,) * 4)


def sample_bspline(table: torch.Tensor, src: torch.Tensor, size: int) -> torch.Tensor:
    """Evaluate per-part cubic B-splines at normalized points.

    ``table`` is ``(L, C, size + 12, size + 12)`` from :func:`spline_table`
    and ``src`` is ``(..., L, h, w, 2)`` normalized ``(x, y)``; part ``l``
    reads ``table[l]``. Returns ``(..., L, C, h, w)``. Points far outside
    the canvas are clamped to where every tap reads a zero coefficient, so
    they give zero with zero gradient.
    """
    L, C, Ht, Wt = table.shape
    lo, hi = -(SPLINE_PAD + 2), size + SPLINE_PAD + 1
    px = norm_to_pixel(src, size).clamp(lo, hi)
    base = torch.floor(px.detach())
    t = px - base
    wx, wy = _bspline_basis(t[..., 0]), _bspline_basis(t[..., 1])
    w16 = (wy.unsqueeze(-1) * wx.unsqueeze(-2)).flatten(-2)
    off = SPLINE_PAD + _TABLE_RING - 1
    corner = (base[..., 1].long() + off) * Wt + base[..., 0].long() + off
    corner = corner + (torch.arange(L) * (C * Ht * Wt)).reshape(L, 1, 1)
    taps = (torch.arange(4).unsqueeze(-1) * Wt + torch.arange(4)).reshape(16)
    idx = corner.unsqueeze(-1) + taps
    chan = (torch.arange(C) * (Ht * Wt)).reshape(C, *([1] * idx.dim()))
    idx = idx + chan
    vals = table.reshape(-1).index_select(0, idx.reshape(-1)).reshape(idx.shape)
    return (vals * w16).sum(-1).movedim(0, -3)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def build_dictionary(label_map, anchors: dict, skeleton: Skeleton | None = None,
                     erosion_radius: int = 2, blur_sigma: float = 1.5) -> PartDictionary:
    """Erode then blur each binary part; the uncertainty band is what erosion removed.

    Parameters
    ----------
    label_map : (H, W) integers, 0 background and ``l + 1`` for limb ``l``.
    anchors : joint name -> pixel ``(x, y)``.
    """
    s = skeleton or default_skeleton()
    label = np.asarray(label_map)
    if label.ndim != 2 or label.shape[0] != label.shape[1]:
        raise TemplateError("template label map must be square")
    size = label.shape[0]
    if label.min() < 0 or label.max() > s.L:
        raise TemplateError(f"template labels must lie in 0..{s.L}")
    phis, psis = [], []
    for l, limb in enumerate(s.limbs):
        binary = label == l + 1
        if not binary.any():
            raise TemplateError(f"part {limb.id!r} is empty in the template")
        eroded = ndimage.binary_erosion(binary, _disk(erosion_radius)) if erosion_radius > 0 else binary
        if not eroded.any():
            raise TemplateError(f"part {limb.id!r} vanishes after erosion radius {erosion_radius}")
        if blur_sigma > 0:
            phi = ndimage.gaussian_filter(eroded.astype(np.float64), blur_sigma, mode="constant")
            soft = ndimage.gaussian_filter(binary.astype(np.float64), blur_sigma, mode="constant")
        else:
            phi, soft = eroded.astype(np.float64), binary.astype(np.float64)
        phis.append(np.clip(phi, 0.0, 1.0))
        psis.append(np.clip(soft - phi, 0.0, 1.0))
    anchor_arr = np.full((s.J, 2), np.nan)
    for limb in s.limbs:
        for j in limb.joints:
            name = s.joints[j]
            if name not in anchors:
                raise TemplateError(f"missing anchor for joint {name!r} (limb {limb.id!r})")
            xy = np.asarray(anchors[name], dtype=np.float64)
            if xy.shape != (2,) or not np.all((xy >= -0.5) & (xy <= size - 0.5)):
                raise TemplateError(f"anchor of {name!r} lies outside the canvas")
            anchor_arr[j] = pixel_to_norm(xy, size)
    return PartDictionary(
        torch.from_numpy(np.stack(phis)),
        torch.from_numpy(np.stack(psis)),
        torch.from_numpy(anchor_arr),
        s,
    )


@lru_cache(maxsize=8)
def _cached_default(erosion_radius: int, blur_sigma: float) -> PartDictionary:
    from .io import load_template

    label, anchors = load_template()
    return build_dictionary(label, anchors, default_skeleton(), erosion_radius, blur_sigma)


def default_dictionary(cfg: PuppetConfig | None = None) -> PartDictionary:
    cfg = cfg or PuppetConfig()
    return _cached_default(int(cfg.erosion_radius), float(cfg.blur_sigma))


@dataclass(frozen=True)
class Affine2D:
    """``x -> linear @ x + translation`` on ``(..., 2)`` points."""

    linear: torch.Tensor
    translation: torch.Tensor

    def apply(self, x) -> torch.Tensor:
        x = as_tensor(x, self.linear)
        return (self.linear @ x.unsqueeze(-1)).squeeze(-1) + self.translation

    def inverse(self) -> "Affine2D":
        inv = torch.linalg.inv(self.linear)
        return Affine2D(inv, -(inv @ self.translation.unsqueeze(-1)).squeeze(-1))

    @property
    def scale(self) -> torch.Tensor:
        return torch.sqrt(torch.det(self.linear).abs())


def _similarity(r: torch.Tensor, q: torch.Tensor, s_min: float = 0.0) -> Affine2D:
    """Least-squares similarity ``q ~ z * r + t`` in complex form.

    ``r`` and ``q`` are ``(..., K, 2)``. Reflections cannot occur since ``z``
    multiplies as a complex number. If ``|z| < s_min`` the scale is raised to
    ``s_min`` about the two centroids.
    """
    rm = r.mean(-2, keepdim=True)
    qm = q.mean(-2, keepdim=True)
    rc, qc = r - rm, q - qm
    den = (rc * rc).sum((-1, -2))
    a = (rc[..., 0] * qc[..., 0] + rc[..., 1] * qc[..., 1]).sum(-1) / den
    b = (rc[..., 0] * qc[..., 1] - rc[..., 1] * qc[..., 0]).sum(-1) / den
    if s_min > 0:
        n2 = a * a + b * b
        collapsed = n2 < 1e-24
        s = torch.sqrt(torch.where(collapsed, torch.ones_like(n2), n2))
        lift = torch.where(s < s_min, s_min / s, torch.ones_like(s))
        # direction is arbitrary when q collapses to a point
        a = torch.where(collapsed, torch.full_like(a, s_min), a * lift)
        b = torch.where(collapsed, torch.zeros_like(b), b * lift)
    lin = torch.stack([torch.stack([a, -b], -1), torch.stack([b, a], -1)], -2)
    t = qm.squeeze(-2) - (lin @ rm.squeeze(-2).unsqueeze(-1)).squeeze(-1)
    return Affine2D(lin, t)


def limb_similarity(r1, r2, q1, q2, s_min: float = 0.0) -> Affine2D:
    """Similarity sending canonical anchors ``r1, r2`` onto ``q1, q2``."""
    r = torch.stack([as_tensor(r1), as_tensor(r2)], dim=-2)
    q = torch.stack([as_tensor(q1), as_tensor(q2)], dim=-2)
    if bool((torch.linalg.vector_norm(r[..., 1, :] - r[..., 0, :], dim=-1) <= 0).any()):
        raise TemplateError("limb anchors coincide")
    return _similarity(r.to(q.dtype), q, s_min)


def torso_similarity(r, q, s_min: float = 0.0) -> Affine2D:
    """Least-squares 2D Procrustes (with scale) over the torso's anchors."""
    r = as_tensor(r)
    q = as_tensor(q)
    rc = (r - r.mean(-2, keepdim=True)).detach().reshape(-1, *r.shape[-2:])
    cov = rc.transpose(-1, -2) @ rc
    if bool((torch.linalg.eigvalsh(cov)[..., 0] <= 1e-12 * cov.diagonal(dim1=-2, dim2=-1).sum(-1)).any()):
        raise TemplateError("torso anchors are collinear")
    return _similarity(r.to(q.dtype), q, s_min)


def part_transforms(dictionary: PartDictionary, q: torch.Tensor, s_min: float = 0.0) -> Affine2D:
    """Stacked per-limb similarities, batch shape ``(..., L)``.

    Limbs with the same number of anchors are solved together.
    """
    s = dictionary.skeleton
    anchors = dictionary.anchors.to(q.dtype)
    lin = q.new_empty(*q.shape[:-2], s.L, 2, 2)
    trans = q.new_empty(*q.shape[:-2], s.L, 2)
    groups: dict[int, list[int]] = {}
    for l, limb in enumerate(s.limbs):
        groups.setdefault(len(limb.joints), []).append(l)
    for ls in groups.values():
        idx = torch.tensor([s.limbs[l].joints for l in ls])
        qq = q[..., idx, :]
        A = _similarity(anchors[idx].expand(*qq.shape), qq, s_min)
        lin[..., ls, :, :] = A.linear
        trans[..., ls, :] = A.translation
    return Affine2D(lin, trans)


SAMPLING_MODES = ("bspline", "bilinear")


def warp(maps: torch.Tensor, A: Affine2D, out_size: int | None = None, sampling: str = "bilinear",
         table: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse-map warp with zero padding outside the canvas.

    ``maps`` is ``(L, C, H, W)`` canonical; ``A`` has batch shape ``(..., L)``.
    ``sampling="bspline"`` uses ``table`` (see :func:`spline_table`) when
    given and derives it from ``maps`` otherwise. Returns
    ``(..., L, C, out, out)``.
    """
    if sampling not in SAMPLING_MODES:
        raise InvalidInputError(f"unknown sampling mode {sampling!r}; expected one of {SAMPLING_MODES}")
    L, C, H, W = maps.shape
    out = out_size or W
    inv = A.inverse()
    batch = inv.linear.shape[:-3]
    grid = pixel_grid(out, maps.dtype)
    lin = inv.linear.reshape(-1, 2, 2)
    t = inv.translation.reshape(-1, 2)
    src = torch.einsum("nij,hwj->nhwi", lin, grid) + t[:, None, None, :]
    n = lin.shape[0]
    if sampling == "bspline":
        if table is None:
            coef = torch.from_numpy(spline_coefficients(maps.detach().cpu().numpy())).to(maps.dtype)
            table = spline_table(coef)
        return sample_bspline(table.to(maps.dtype), src.reshape(*batch, L, out, out, 2), W)
    else:
        inp = maps.expand(*batch, L, C, H, W).reshape(n, C, H, W)
        res = F.grid_sample(inp, src, mode="bilinear", padding_mode="zeros", align_corners=False)
    return res.reshape(*batch, L, C, out, out)


def deform(dictionary: PartDictionary, q, out_size: int | None = None, s_min: float = 0.0,
           sampling: str = "bspline"):
    """Pose-deformed part maps ``phi_p`` and uncertainty maps ``psi_p``.

    ``q`` is ``(..., J, 2)``. Both outputs are ``(..., L, out, out)``.
    """
    q = as_tensor(q)
    d = dictionary if dictionary.phi.dtype == q.dtype else dictionary.to(q.dtype)
    A = part_transforms(d, q, s_min)
    maps = torch.stack([d.phi, d.psi], dim=1)
    res = warp(maps, A, out_size, sampling, d.table)
    if sampling == "bspline":
        # the interpolating spline rings slightly below 0 and above 1 next to sharp edges
        res = res.clamp(0.0, 1.0)
    return res[..., 0, :, :], res[..., 1, :, :]


def limb_depths(q_d, skeleton: Skeleton | None = None) -> torch.Tensor:
    """Mean camera depth of each limb's anchor joints, ``(..., L)``."""
    s = skeleton or default_skeleton()
    q_d = as_tensor(q_d)
    return torch.stack([q_d[..., list(limb.joints)].mean(-1) for limb in s.limbs], dim=-1)


def depth_compose(phi_p, d, tau: float = 0.1, normalize_depth: bool = True):
    """Two-stage softmax giving depth-modulated and final soft part maps.

    Stage a: softmax over parts of ``phi_p / d / tau``; stage b: background
    channel ``1 - max``; stage c: softmax over all ``L + 1`` channels of
    stage-a/b values divided by ``tau``.

    Returns ``(phi_d, phi_bar)``, both ``(..., L+1, H, W)``.
    """
    phi_p = as_tensor(phi_p)
    d = as_tensor(d, phi_p).to(phi_p.dtype)
    if bool((d <= 0).any()):
        raise InvalidInputError("limb depths must be positive")
    if not tau > 0:
        raise InvalidInputError("temperature must be positive")
    if normalize_depth:
        d = d / d.mean(-1, keepdim=True)
    logits = phi_p / d[..., None, None] / tau
    phi_d = torch.softmax(logits, dim=-3)
    bg = 1.0 - torch.max(phi_d, dim=-3, keepdim=True).values
    phi_d = torch.cat([phi_d, bg], dim=-3)
    phi_bar = torch.softmax(phi_d / tau, dim=-3)
    return phi_d, phi_bar


def aggregate_maps(phi_p, psi_p):
    """``w_fg = max_l phi_p`` and ``w_unc = max_l psi_p``, shape ``(..., H, W)``."""
    phi_p, psi_p = as_tensor(phi_p), as_tensor(psi_p)
    return torch.max(phi_p, dim=-3).values, torch.max(psi_p, dim=-3).values


@nondifferentiable
def hard_segmentation(phi_bar) -> torch.Tensor:
    """Per-pixel label in ``1..L+1`` (``L+1`` = background); ties go to the lowest channel."""
    return torch.argmax(as_tensor(phi_bar), dim=-3) + 1


def render_flat(phi_bar, part_colors, bg_color=(0.5, 0.5, 0.5)) -> torch.Tensor:
    """Convex per-pixel mix of part colours; returns ``(..., 3, H, W)``."""
    phi_bar = as_tensor(phi_bar)
    colors = as_tensor(part_colors, phi_bar).to(phi_bar.dtype)
    bg = as_tensor(bg_color, phi_bar).to(phi_bar.dtype)
    bg = bg.expand(*colors.shape[:-2], 1, 3)
    palette = torch.cat([colors, bg], dim=-2)
    return torch.einsum("...lhw,...lc->...chw", phi_bar, palette)


@dataclass
class PartMaps:
    q: torch.Tensor
    q_d: torch.Tensor
    d: torch.Tensor
    phi_p: torch.Tensor
    psi_p: torch.Tensor
    phi_d: torch.Tensor
    phi_bar: torch.Tensor
    w_fg: torch.Tensor
    w_unc: torch.Tensor

    def labels(self) -> torch.Tensor:
        return hard_segmentation(self.phi_bar.detach())


def pose_maps(p3d, cam: CameraParams, dictionary: PartDictionary, cfg: PuppetConfig | None = None,
              f: float = 1.2, out_size: int | None = None, check: bool = True) -> PartMaps:
    """Canonical pose -> projection -> deformed maps -> depth-aware composite."""
    cfg = cfg or PuppetConfig()
    q, q_d = project(p3d, cam, f, check=check)
    return maps_from_projection(q, q_d, dictionary, cfg, out_size)


def maps_from_projection(q, q_d, dictionary: PartDictionary, cfg: PuppetConfig | None = None,
                         out_size: int | None = None) -> PartMaps:
    cfg = cfg or PuppetConfig()
    phi_p, psi_p = deform(dictionary, q, out_size, cfg.s_min, cfg.sampling)
    d = limb_depths(q_d, dictionary.skeleton)
    phi_d, phi_bar = depth_compose(phi_p, d, cfg.tau, cfg.normalize_depth)
    w_fg, w_unc = aggregate_maps(phi_p, psi_p)
    return PartMaps(q, q_d, d, phi_p, psi_p, phi_d, phi_bar, w_fg, w_unc)

