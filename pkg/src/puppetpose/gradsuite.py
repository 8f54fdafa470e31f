"""Registered gradient-check cases for every differentiable op and loss.

Vector-valued ops are reduced to a scalar by a fixed random weighting drawn
with the point, so a single check covers the whole vector-Jacobian product.
"""

from __future__ import annotations

import numpy as np
import torch

from . import geometry as geo
from . import losses
from .camera import UPRIGHT_BOUNDS, CameraParams, project, sample_camera
from .config import PuppetConfig
from .diffcore import ParameterVector, register
from .posebank import canonical_pose
from .puppet import (aggregate_maps, default_dictionary, deform, depth_compose, limb_depths, limb_similarity,
                     maps_from_projection, part_transforms, render_flat, torso_similarity)

RES = 64  # single-op warp checks
PIPE_RES = 32  # composite checks: same ops, fewer pixels per evaluation
PROBE_STEP = 2e-5  # twice the default check step
CFG = PuppetConfig()
SKEL = geo.default_skeleton()
ART = list(SKEL.articulated)
V0 = geo.template_local_pose(SKEL)


def _unit_rows(v):
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True)


def _wsum(ctx: int, *outs) -> torch.Tensor:
    flat = torch.cat([o.reshape(-1) for o in outs])
    w = torch.from_numpy(np.random.default_rng(ctx).normal(size=flat.numel()))
    return (w.to(flat.dtype) * flat).sum()


def _with_ctx(sampler):
    def sample(rng):
        return sampler(rng), int(rng.integers(2**31))

    return sample


def _pose_point(rng):
    p = torch.from_numpy(canonical_pose(rng))
    cam = sample_camera(rng, UPRIGHT_BOUNDS, p)
    return p, cam


def _sample_local(rng):
    p, _ = _pose_point(rng)
    return ParameterVector.from_arrays(v=geo.inverse_kinematics(p))


@register("forward_kinematics", _with_ctx(_sample_local))
def _fk(x, ctx):
    return _wsum(ctx, geo.forward_kinematics(_unit_rows(x["v"]), validate=False))


def _sample_positions(rng):
    p, _ = _pose_point(rng)
    return ParameterVector.from_arrays(p=p + 0.05 * torch.from_numpy(rng.normal(size=p.shape)))


@register("face_vector", _with_ctx(_sample_positions))
def _face(x, ctx):
    return _wsum(ctx, geo.face_vector(x["p"]))


@register("parent_frame", _with_ctx(_sample_positions))
def _frame(x, ctx):
    s = geo.default_skeleton()
    return _wsum(ctx, *[geo.parent_frame(x["p"], j, s) for j in s.articulated])


@register("inverse_kinematics", _with_ctx(_sample_positions))
def _ik(x, ctx):
    return _wsum(ctx, geo.inverse_kinematics(x["p"]))


def _sample_world(rng):
    from .posebank import random_rotation

    p, _ = _pose_point(rng)
    R = torch.from_numpy(random_rotation(rng))
    w = 2.0 * p @ R.T + torch.from_numpy(rng.normal(size=3))
    return ParameterVector.from_arrays(w=w + 0.02 * torch.from_numpy(rng.normal(size=w.shape)))


@register("align_canonical", _with_ctx(_sample_world))
def _align(x, ctx):
    return _wsum(ctx, geo.align_canonical(x["w"]))


def _sample_projection(rng):
    p, cam = _pose_point(rng)
    return ParameterVector.from_arrays(p=p, camera=cam.vector)


@register("project", _with_ctx(_sample_projection))
def _project(x, ctx):
    q, qd = project(x["p"], CameraParams(x["camera"]))
    return _wsum(ctx, q, qd)


def _sample_limb(rng):
    return ParameterVector.from_arrays(q=rng.uniform(-0.8, 0.8, size=(2, 2)))


@register("limb_similarity", _with_ctx(_sample_limb))
def _limb(x, ctx):
    A = limb_similarity([0.1, -0.3], [0.05, 0.2], x["q"][0], x["q"][1], s_min=CFG.s_min)
    return _wsum(ctx, A.linear, A.translation)


def _sample_torso(rng):
    r = np.array([[0.0, 0.1], [0.0, -0.4], [0.15, 0.1], [-0.15, 0.1]])
    return ParameterVector.from_arrays(q=r * rng.uniform(0.5, 1.5) + rng.normal(scale=0.05, size=(4, 2)))


@register("torso_similarity", _with_ctx(_sample_torso))
def _torso(x, ctx):
    r = torch.tensor([[0.0, 0.1], [0.0, -0.4], [0.15, 0.1], [-0.15, 0.1]], dtype=torch.float64)
    A = torso_similarity(r, x["q"], s_min=CFG.s_min)
    return _wsum(ctx, A.linear, A.translation)


SKEL_USED = sorted({j for limb in SKEL.limbs for j in limb.joints})


def _sample_q(rng):
    """A projected pose whose limbs all stay clear of the scale floor."""
    while True:
        p, cam = _pose_point(rng)
        q, _ = project(p, cam)
        if bool((part_transforms(default_dictionary(CFG), q, 0.0).scale >= 2 * CFG.s_min).all()):
            return ParameterVector.from_arrays(q=q[SKEL_USED])


def _sample_qd(rng):
    p, cam = _pose_point(rng)
    _, qd = project(p, cam)
    return ParameterVector.from_arrays(qd=qd)


def _full_q(qs):
    return torch.zeros(SKEL.J, 2, dtype=qs.dtype).index_put((torch.tensor(SKEL_USED),), qs)


@register("deform", _with_ctx(_sample_q))
def _deform(x, ctx):
    phi, psi = deform(default_dictionary(CFG), _full_q(x["q"]), RES, CFG.s_min, CFG.sampling)
    return _wsum(ctx, phi, psi)


@register("limb_depths", _with_ctx(_sample_qd))
def _depths(x, ctx):
    return _wsum(ctx, limb_depths(x["qd"]))


def _sample_maps(rng):
    L = geo.default_skeleton().L
    return ParameterVector.from_arrays(phi=rng.uniform(0, 1, size=(L, 6, 6)), d=rng.uniform(2.5, 5.0, size=L))


@register("depth_compose", _with_ctx(_sample_maps))
def _compose(x, ctx):
    phi_d, phi_bar = depth_compose(x["phi"], x["d"], CFG.tau, CFG.normalize_depth)
    return _wsum(ctx, phi_d, phi_bar)


def _sample_pair_maps(rng):
    L = geo.default_skeleton().L
    return ParameterVector.from_arrays(phi=rng.uniform(0, 1, size=(L, 6, 6)), psi=rng.uniform(0, 1, size=(L, 6, 6)))


@register("aggregate_maps", _with_ctx(_sample_pair_maps))
def _aggregate(x, ctx):
    return _wsum(ctx, *aggregate_maps(x["phi"], x["psi"]))


def _sample_render(rng):
    L = geo.default_skeleton().L
    logits = rng.normal(size=(L + 1, 6, 6))
    return ParameterVector.from_arrays(phi=logits, colors=rng.uniform(0, 1, (L, 3)), bg=rng.uniform(0, 1, 3))


@register("render_flat", _with_ctx(_sample_render))
def _render(x, ctx):
    phi_bar = torch.softmax(x["phi"], dim=0)
    return _wsum(ctx, render_flat(phi_bar, x["colors"], x["bg"]))


# ---------------------------------------------------------------- composites
#
# Composite check points are points of differentiability: the L1 losses are
# checked against targets kept away from the rendering, and points where a
# max reduction or the scale floor would switch inside the probe step are
# redrawn.

PALETTE = torch.from_numpy(np.random.default_rng(7).uniform(0.05, 0.95, (SKEL.L, 3)))


def _draw_pipeline(rng):
    """Local vectors of the articulated joints plus the camera.

    Pinned joints ignore their local vectors, so they are held fixed.
    """
    p, cam = _pose_point(rng)
    return ParameterVector.from_arrays(v=geo.inverse_kinematics(p)[ART], camera=cam.vector)


def _pipeline(x, out_size=PIPE_RES):
    v = V0.to(x.data.dtype).index_put((torch.tensor(ART),), _unit_rows(x["v"]))
    p3d = geo.forward_kinematics(v, validate=False)
    q, qd = project(p3d, CameraParams(x["camera"]))
    maps = maps_from_projection(q, qd, default_dictionary(CFG), CFG, out_size)
    img = render_flat(maps.phi_bar, PALETTE)
    return maps, img


def _switches(maps):
    """Winner of every max/argmax reduction, and where the winner carries signal."""
    top_phi = maps.phi_p.amax(-3)
    idx = torch.stack([maps.phi_p.argmax(-3), maps.psi_p.argmax(-3), maps.phi_d[:-1].argmax(-3)])
    live = torch.stack([top_phi, maps.psi_p.amax(-3), top_phi]) > 1e-6
    return idx, live


_KINK_CACHE: dict[bytes, bool] = {}


def _kink_free(x, out_size=PIPE_RES) -> bool:
    key = x.numpy().tobytes() + bytes([out_size])
    if key not in _KINK_CACHE:
        _KINK_CACHE[key] = _probe_kinks(x, out_size)
    return _KINK_CACHE[key]


def _probe_kinks(x, out_size: int) -> bool:
    """True when no max reduction changes winner within the probe step.

    Every coordinate is moved by twice the check step in both directions;
    winners may change only where the competing maps are negligible.
    Limbs foreshortened to the scale floor are also refused: the floor is a
    switch, and near it the part's orientation turns very fast.
    """
    with torch.no_grad():
        maps, _ = _pipeline(x, out_size)
        raw = part_transforms(default_dictionary(CFG), maps.q, 0.0)
        if bool((raw.scale < 2 * CFG.s_min).any()):
            return False
        base, live = _switches(maps)
        for i in range(len(x)):
            for sgn in (1.0, -1.0):
                xi = x.data.clone()
                xi[i] += sgn * PROBE_STEP
                idx, _ = _switches(_pipeline(x.with_data(xi), out_size)[0])
                if bool(((idx != base) & live).any()):
                    return False
    return True


def _sample_pipeline(rng, tries: int = 200):
    for _ in range(tries):
        x = _draw_pipeline(rng)
        if _kink_free(x):
            return x
    raise RuntimeError("no kink-free pipeline point found")


@register("pipeline_render", _with_ctx(_sample_pipeline))
def _pipe_render(x, ctx):
    return _wsum(ctx, _pipeline(x)[1])


def _offset_target(rng, img: torch.Tensor) -> torch.Tensor:
    """A target at least 0.05 away from ``img`` in every channel.

    L1 losses have kinks where rendering and target agree; keeping the
    check point away from them makes it a point of differentiability.
    """
    gap = torch.from_numpy(rng.uniform(0.05, 0.3, size=img.shape))
    return torch.where(img > 0.5, img - gap, img + gap)


def _sample_pipeline_with_targets(rng):
    x = _sample_pipeline(rng)
    seed = int(rng.integers(2**31))
    with torch.no_grad():
        maps, img = _pipeline(x)
    trng = np.random.default_rng(seed)
    ctx = {
        "seed": seed,
        "target": _offset_target(trng, img),
        "other": _offset_target(trng, img),
        "m_sal": torch.from_numpy(trng.uniform(0, 1, size=img.shape[-2:])),
        "labels": torch.from_numpy(trng.integers(1, maps.phi_bar.shape[0] + 1, size=img.shape[-2:])),
        "appearance": _offset_target(trng, img),
    }
    return x, ctx


@register("loss_recon_uncertain", _sample_pipeline_with_targets)
def _l_unc(x, ctx):
    maps, img = _pipeline(x)
    return losses.recon_uncertain(img, ctx["target"], maps.phi_bar[-1], ctx["m_sal"], beta=0.5)


@register("loss_recon_certain", _sample_pipeline_with_targets)
def _l_cert(x, ctx):
    maps, img = _pipeline(x)
    return losses.recon_certain(img, ctx["other"], maps.w_fg, (0.5, 0.5, 0.5))


@register("loss_seg_consistency", _sample_pipeline_with_targets)
def _l_seg(x, ctx):
    maps, _ = _pipeline(x)
    return losses.seg_consistency(maps.phi_bar, ctx["labels"], maps.w_unc)


@register("loss_energy_pose", _with_ctx(_draw_pipeline))
def _l_pose(x, ctx):
    v = V0.index_put((torch.tensor(ART),), _unit_rows(x["v"]))
    p3d = geo.forward_kinematics(v, validate=False)
    target = geo.template_positions(SKEL)
    return losses.energy_pose(target, p3d)


@register("loss_energy_appearance", _sample_pipeline_with_targets)
def _l_app(x, ctx):
    _, img = _pipeline(x)
    return losses.energy_appearance(ctx["appearance"], img)
