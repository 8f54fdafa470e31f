"""Analysis-by-synthesis pose recovery through the differentiable puppet.

The fitted parameters are the local vectors of the articulated joints, the
six camera extrinsics and (in image mode) one colour per part. Each step is
a proposal followed by projection onto the feasible set (unit local
vectors, framing camera, colours in ``[0, 1]``); a proposal that raises the
loss is rejected and the step halved.

Two proposal rules are available. ``"lbfgs"`` (the default) scales the
gradient by a limited-memory inverse-Hessian estimate built from accepted
steps. ``"adagrad"`` divides by the root of the accumulated squared
gradients. The image loss is badly conditioned: a limb lying in the image
plane changes its silhouette only to second order when it tilts towards
the camera, so per-coordinate scaling alone stalls well short of the true
pose while the curvature estimate recovers it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .camera import CameraBounds, CameraParams, clamp_in_frame, project
from .config import FitConfig, PuppetConfig
from .diffcore import ParameterVector, value_and_gradient
from .errors import ConfigError, FitFailureError, InvalidInputError
from .geometry import Skeleton, as_tensor, default_skeleton, forward_kinematics
from .puppet import PartDictionary, default_dictionary, maps_from_projection, render_flat

MODES = ("image", "seg")
OPTIMIZERS = ("lbfgs", "adagrad")
IMAGE_LOSSES = ("l2", "l1")
ADAGRAD_EPS = 1e-8
MIN_STEP = 1e-10
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9


@dataclass
class FitInit:
    """Starting point: full ``(J, 3)`` local pose, camera and optional colours."""

    v3d: torch.Tensor
    camera: CameraParams
    colors: torch.Tensor | None = None


@dataclass
class FitResult:
    v3d: torch.Tensor
    camera: CameraParams
    colors: torch.Tensor | None
    loss: float
    trace: list[float]
    wall_time: float
    restart: int = 0
    iterations: int = 0
    restart_losses: list[float] = field(default_factory=list)

    @property
    def pose(self) -> torch.Tensor:
        return forward_kinematics(self.v3d, validate=False)

    def to_dict(self) -> dict:
        return {
            "v3d": self.v3d.tolist(),
            "pose": self.pose.tolist(),
            "camera": self.camera.tolist(),
            "colors": None if self.colors is None else self.colors.tolist(),
            "loss": self.loss,
            "iterations": self.iterations,
            "restart": self.restart,
            "restart_losses": self.restart_losses,
            "wall_time": self.wall_time,
        }


def validate_config(cfg: FitConfig) -> None:
    if cfg.max_iters <= 0:
        raise ConfigError("fit.max_iters must be positive")
    if not cfg.lr > 0:
        raise ConfigError("fit.lr must be positive")
    if cfg.restarts < 1:
        raise ConfigError("fit.restarts must be at least 1")
    if cfg.mode not in MODES:
        raise ConfigError(f"fit.mode must be one of {MODES}")
    if cfg.prior_weight < 0:
        raise ConfigError("fit.prior_weight must be non-negative")
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(f"fit.optimizer must be one of {OPTIMIZERS}")
    if cfg.image_loss not in IMAGE_LOSSES:
        raise ConfigError(f"fit.image_loss must be one of {IMAGE_LOSSES}")
    if cfg.history < 1:
        raise ConfigError("fit.history must be at least 1")


class Objective:
    """Loss of a parameter vector against a fixed target.

    Parameters
    ----------
    target : ``(3, H, W)`` image in ``[0, 1]`` (image mode) or ``(H, W)``
        labels in ``1..L+1`` (seg mode). Rendering happens at the target's
        resolution.
    bank : optional ``(N, J, 3)`` canonical poses for the prior term.
    image_loss : ``"l2"`` (mean squared error) or ``"l1"`` (mean absolute
        error) between rendering and target in image mode.
    """

    def __init__(self, target, mode: str, dictionary: PartDictionary, puppet: PuppetConfig,
                 bg_color=(0.5, 0.5, 0.5), prior_weight: float = 0.0, bank=None, f: float = 1.2,
                 image_loss: str = "l2"):
        self.mode = mode
        self.image_loss = image_loss
        self.dictionary = dictionary
        self.skeleton: Skeleton = dictionary.skeleton
        self.puppet = puppet
        self.bg = as_tensor(bg_color).to(torch.float64)
        self.prior_weight = prior_weight
        self.bank = None if bank is None else as_tensor(bank).to(torch.float64)
        self.f = f
        self.art = list(self.skeleton.articulated)
        if mode == "image":
            t = as_tensor(target).to(torch.float64)
            if t.ndim != 3 or t.shape[0] != 3 or t.shape[1] != t.shape[2]:
                raise InvalidInputError("image target must be (3, N, N)")
            self.size = t.shape[-1]
        else:
            t = torch.as_tensor(np.asarray(target)).long()
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise InvalidInputError("segmentation target must be (N, N)")
            if int(t.min()) < 1 or int(t.max()) > self.skeleton.L + 1:
                raise InvalidInputError(f"labels must lie in 1..{self.skeleton.L + 1}")
            self.size = t.shape[-1]
        self.target = t

    def full_pose(self, x: ParameterVector, base: torch.Tensor) -> torch.Tensor:
        """Local pose with the fitted rows normalized.

        Normalizing here makes the loss invariant to the length of each
        fitted vector, so the unit-norm projection never changes the loss
        and the gradient has no radial part.
        """
        v = x["v"]
        v = v / torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(1e-12)
        return base.to(x.data.dtype).index_put((torch.tensor(self.art),), v)

    def render(self, v3d, camera, colors=None):
        p = forward_kinematics(v3d, self.skeleton, validate=False, eps=1e-9)
        q, qd = project(p, CameraParams(camera), self.f, check=False)
        maps = maps_from_projection(q, qd, self.dictionary, self.puppet, self.size)
        img = None if colors is None else render_flat(maps.phi_bar, colors, self.bg)
        return p, maps, img

    def __call__(self, x: ParameterVector, base: torch.Tensor) -> torch.Tensor:
        v = self.full_pose(x, base)
        colors = x["colors"] if self.mode == "image" else None
        p, maps, img = self.render(v, x["camera"], colors)
        if self.mode == "image":
            r = img - self.target
            loss = (r * r).mean() if self.image_loss == "l2" else r.abs().mean()
        else:
            loss = losses.cross_entropy_map(maps.phi_bar, self.target).mean()
        if self.prior_weight > 0 and self.bank is not None:
            loss = loss + self.prior_weight * prior_distance(p, self.bank)
        return loss


def prior_distance(p: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Mean absolute coordinate distance to the nearest bank pose."""
    d = (bank - p.unsqueeze(0)).abs().mean((-1, -2))
    return d.min()


def _project_params(x: ParameterVector, mode: str, bounds: CameraBounds, pose_fn, f: float) -> ParameterVector:
    """Unit local vectors, framing camera, colours in [0, 1]."""
    data = x.data.clone()
    a, b, shape = x.layout["v"]
    v = data[a:b].reshape(shape)
    v = v / torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(1e-12)
    data[a:b] = v.reshape(-1)
    p = pose_fn(x.with_data(data))
    a, b, _ = x.layout["camera"]
    try:
        cam = clamp_in_frame(CameraParams(data[a:b]), p, bounds, f)
        data[a:b] = cam.vector
    except ConfigError:
        # framing would need tz above its bound: keep the box clamp only
        lo = torch.as_tensor(bounds.low, dtype=data.dtype)
        hi = torch.as_tensor(bounds.high, dtype=data.dtype)
        data[a:b] = torch.minimum(torch.maximum(data[a:b], lo), hi)
    if mode == "image":
        a, b, _ = x.layout["colors"]
        data[a:b] = data[a:b].clamp(0.0, 1.0)
    return x.with_data(data)


def _lbfgs_direction(g: torch.Tensor, pairs: list) -> torch.Tensor:
    """Two-loop recursion: ``-H g`` for the inverse-Hessian estimate of ``pairs``."""
    q = g.clone()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * torch.dot(s, q)
        alphas.append(a)
        q = q - a * y
    s, y, _ = pairs[-1]
    q = q * (torch.dot(s, y) / torch.dot(y, y))
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * torch.dot(y, q)
        q = q + (a - b) * s
    return -q


def _run(obj: Objective, x0: ParameterVector, base: torch.Tensor, cfg: FitConfig, bounds: CameraBounds):
    """One restart. Returns (best x, best loss, trace, iterations)."""

    def pose_fn(x):
        with torch.no_grad():
            return forward_kinematics(obj.full_pose(x, base), obj.skeleton, validate=False, eps=1e-9)

    def value_and_grad(x):
        val, g = value_and_gradient(lambda v: obj(v, base), x)
        return val, g.data

    x = _project_params(x0, obj.mode, bounds, pose_fn, obj.f)
    loss, g = value_and_grad(x)
    trace = [loss]
    if not math.isfinite(loss):
        return x, loss, trace, 0
    step = _lbfgs_steps if cfg.optimizer == "lbfgs" else _adagrad_steps
    return step(x, loss, g, value_and_grad, lambda z: _project_params(z, obj.mode, bounds, pose_fn, obj.f), cfg)


def _adagrad_steps(x, loss, g, value_and_grad, project_fn, cfg: FitConfig):
    """Adagrad proposals; a proposal that raises the loss halves the rate.

    Every proposal, accepted or not, counts as one iteration.
    """
    trace = [loss]
    acc = torch.zeros_like(x.data)
    lr = cfg.lr
    since_best = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if loss <= cfg.tol or lr < MIN_STEP or since_best >= cfg.patience:
            it -= 1
            break
        if since_best == 0:
            acc = acc + g * g
        prop = project_fn(x.with_data(x.data - lr * g / (acc.sqrt() + ADAGRAD_EPS)))
        new_loss, new_g = value_and_grad(prop)
        if math.isfinite(new_loss) and new_loss <= loss:
            since_best = 0 if new_loss < loss - 1e-12 * max(abs(loss), 1.0) else since_best + 1
            x, loss, g = prop, new_loss, new_g
        else:
            lr *= 0.5
            since_best += 1
        trace.append(loss)
    return x, loss, trace, it


def _lbfgs_steps(x, loss, g, value_and_grad, project_fn, cfg: FitConfig):
    """Limited-memory quasi-Newton steps with a strong Wolfe line search.

    A trial point above the sufficient-decrease line, or one whose slope has
    turned steeply positive, halves the bracket; a point whose slope is
    still steeply negative doubles the step. Each
    accepted line search counts as one iteration, and the total number of
    evaluations is capped at ``1.25 * max_iters``.
    """
    trace = [loss]
    pairs: list = []
    budget = cfg.max_iters * 5 // 4
    evals = 0
    stalls = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if loss <= cfg.tol or evals >= budget or stalls >= cfg.patience:
            it -= 1
            break
        if pairs:
            d = _lbfgs_direction(g, pairs)
            t = 1.0
        else:
            d = -g
            t = cfg.lr / g.abs().max().clamp_min(1e-300).item()
        slope = torch.dot(g, d).item()
        if slope >= 0:
            pairs.clear()
            d, slope = -g, -torch.dot(g, g).item()
            t = cfg.lr / g.abs().max().clamp_min(1e-300).item()
        lo, hi = 0.0, math.inf
        found = None
        best_trial = None
        while evals < budget and t > MIN_STEP:
            prop = project_fn(x.with_data(x.data + t * d))
            new_loss, new_g = value_and_grad(prop)
            evals += 1
            if not math.isfinite(new_loss) or new_loss > loss + WOLFE_C1 * t * slope:
                hi = t
            else:
                if new_loss <= loss and (best_trial is None or new_loss < best_trial[1]):
                    best_trial = (prop, new_loss, new_g)
                new_slope = torch.dot(new_g, d).item()
                if new_slope < WOLFE_C2 * slope:
                    lo = t
                elif new_slope > -WOLFE_C2 * slope:
                    hi = t
                else:
                    found = best_trial
                    break
            t = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * lo
        if found is None:
            found = best_trial
        if found is None:
            # no decrease along this direction: drop the curvature memory once
            if not pairs:
                trace.append(loss)
                break
            pairs.clear()
            stalls += 1
            trace.append(loss)
            continue
        prop, new_loss, new_g = found
        stalls = 0 if new_loss < loss - 1e-12 * max(abs(loss), 1.0) else stalls + 1
        s_vec, y_vec = prop.data - x.data, new_g - g
        sy = torch.dot(s_vec, y_vec)
        if sy > 1e-10 * torch.linalg.vector_norm(s_vec) * torch.linalg.vector_norm(y_vec):
            pairs.append((s_vec, y_vec, 1.0 / sy))
            del pairs[:-cfg.history]
        x, loss, g = prop, new_loss, new_g
        trace.append(loss)
    return x, loss, trace, it


def fit(target, init: FitInit, cfg: FitConfig | None = None, *, dictionary: PartDictionary | None = None,
        puppet: PuppetConfig | None = None, bounds: CameraBounds | None = None, bank=None,
        rng: np.random.Generator | None = None, bg_color=(0.5, 0.5, 0.5), f: float = 1.2) -> FitResult:
    """Recover pose, camera and colours that re-render ``target``.

    Restart 0 starts from ``init``; later restarts replace the pose with a
    draw from ``bank`` (canonical ``(N, J, 3)`` poses, required when
    ``restarts > 1``) and keep the camera and colours. The restart with the
    lowest final loss wins.

    Raises
    ------
    FitFailureError
        If every restart ends with a non-finite loss.
    """
    from .geometry import inverse_kinematics

    cfg = cfg or FitConfig()
    validate_config(cfg)
    puppet = puppet or PuppetConfig()
    dictionary = dictionary or default_dictionary(puppet)
    bounds = bounds or CameraBounds()
    rng = rng or np.random.default_rng(0)
    s = dictionary.skeleton
    obj = Objective(target, cfg.mode, dictionary, puppet, bg_color, cfg.prior_weight, bank, f,
                    cfg.image_loss)
    base = as_tensor(init.v3d).to(torch.float64)
    if base.shape != (s.J, 3):
        raise InvalidInputError(f"init pose must be ({s.J}, 3)")
    art = list(s.articulated)
    colors = init.colors
    if cfg.mode == "image" and colors is None:
        colors = torch.full((s.L, 3), 0.5, dtype=torch.float64)
    if cfg.restarts > 1 and bank is None:
        raise InvalidInputError("restarts beyond the first need a pose bank to draw from")

    t0 = time.perf_counter()
    best = None
    traces, finals = [], []
    for r in range(cfg.restarts):
        if r == 0:
            v0 = base
        else:
            pick = as_tensor(bank)[int(rng.integers(len(bank)))]
            v0 = inverse_kinematics(pick, s, check=False)
        arrays = {"v": v0[art], "camera": init.camera.vector.to(torch.float64)}
        if cfg.mode == "image":
            arrays["colors"] = as_tensor(colors).to(torch.float64)
        x0 = ParameterVector.from_arrays(**arrays)
        x, loss, trace, its = _run(obj, x0, v0, cfg, bounds)
        traces.append(trace)
        finals.append(loss)
        if math.isfinite(loss) and (best is None or loss < best[1]):
            best = (x, loss, trace, its, r, v0)
    if best is None:
        raise FitFailureError("every restart diverged", traces)
    x, loss, trace, its, r, v0 = best
    v3d = obj.full_pose(x, v0).detach()
    return FitResult(
        v3d=v3d,
        camera=CameraParams(x["camera"].detach().clone()),
        colors=x["colors"].detach().clone() if cfg.mode == "image" else None,
        loss=loss,
        trace=trace,
        wall_time=time.perf_counter() - t0,
        restart=r,
        iterations=its,
        restart_losses=finals,
    )
