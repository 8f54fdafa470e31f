"""Reverse-mode gradients and a finite-difference verification harness.

Reverse mode is delegated to torch autograd (one graph per evaluation).
:func:`gradcheck` is deliberately independent of it: plain central
differences evaluated under ``torch.no_grad``.
"""

from __future__ import annotations

import functools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import InvalidInputError, NumericError, UnsupportedOpError

_state = threading.local()


@contextmanager
def _tape():
    prev = getattr(_state, "active", False)
    _state.active = True
    try:
        yield
    finally:
        _state.active = prev


def nondifferentiable(fn):
    """Mark a primitive that has no gradient.

    Inside :func:`gradient` it raises :class:`UnsupportedOpError` when any
    tensor argument is attached to the graph; elsewhere it runs normally.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if getattr(_state, "active", False) and torch.is_grad_enabled():
            for a in list(args) + list(kwargs.values()):
                if isinstance(a, torch.Tensor) and a.requires_grad:
                    raise UnsupportedOpError(f"{fn.__name__} is not differentiable")
        return fn(*args, **kwargs)

    return wrapper


class ParameterVector:
    """Flat float64 vector with named, reshaped views.

    >>> x = ParameterVector.from_arrays(v3d=np.zeros((17, 3)), camera=np.zeros(6))
    >>> x["camera"].shape
    torch.Size([6])
    """

    def __init__(self, data, layout: dict[str, tuple[int, int, tuple]]):
        self.data = torch.as_tensor(data, dtype=torch.float64) if not isinstance(data, torch.Tensor) else data
        self.layout = dict(layout)
        spans = sorted((a, b) for a, b, _ in self.layout.values())
        pos = 0
        for a, b in spans:
            if a != pos:
                raise InvalidInputError("parameter slices must be disjoint and cover the vector")
            pos = b
        if pos != self.data.numel():
            raise InvalidInputError("parameter slices must be disjoint and cover the vector")

    @classmethod
    def from_arrays(cls, **arrays) -> "ParameterVector":
        layout, chunks, pos = {}, [], 0
        for name, arr in arrays.items():
            t = torch.as_tensor(np.asarray(arr, dtype=np.float64) if not isinstance(arr, torch.Tensor) else arr.detach(),
                                dtype=torch.float64)
            layout[name] = (pos, pos + t.numel(), tuple(t.shape))
            chunks.append(t.reshape(-1))
            pos += t.numel()
        return cls(torch.cat(chunks) if chunks else torch.zeros(0, dtype=torch.float64), layout)

    def __getitem__(self, name: str) -> torch.Tensor:
        a, b, shape = self.layout[name]
        return self.data[a:b].reshape(shape)

    def __len__(self) -> int:
        return self.data.numel()

    def names(self) -> list[str]:
        return list(self.layout)

    def with_data(self, data) -> "ParameterVector":
        return ParameterVector(data, self.layout)

    def coordinate_name(self, i: int) -> str:
        for name, (a, b, shape) in self.layout.items():
            if a <= i < b:
                idx = np.unravel_index(i - a, shape) if shape else ()
                return f"{name}[{','.join(map(str, idx))}]"
        raise IndexError(i)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


def gradient(f: Callable[[ParameterVector], torch.Tensor], x: ParameterVector) -> ParameterVector:
    """Exact reverse-mode gradient of scalar ``f`` at ``x``."""
    return value_and_gradient(f, x)[1]


def value_and_gradient(f: Callable[[ParameterVector], torch.Tensor], x: ParameterVector):
    """``(f(x), gradient(f, x))`` from a single evaluation."""
    xt = x.data.detach().clone().requires_grad_(True)
    with torch.enable_grad(), _tape():
        y = f(x.with_data(xt))
    if not isinstance(y, torch.Tensor):
        y = torch.as_tensor(y, dtype=torch.float64)
    if y.numel() != 1:
        raise InvalidInputError("gradient needs a scalar function")
    val = float(y.detach())
    if not y.requires_grad:
        return val, x.with_data(torch.zeros_like(xt))
    (g,) = torch.autograd.grad(y.reshape(()), xt, allow_unused=True)
    return val, x.with_data(torch.zeros_like(xt) if g is None else g.detach())


@dataclass
class GradReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    max_rel_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_rel_error = float(self.rel_error.max()) if self.rel_error.size else 0.0
        self.passed = self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_ratio: float = 1e-3,
                   atol: float = 1e-10) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` per coordinate.

    ``floor = floor_ratio * max(|a|_inf, |n|_inf) + atol``: coordinates whose
    derivative is a thousand times smaller than the largest one are judged
    against that scale instead of their own (finite differences cannot
    resolve them relatively).
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    floor = floor_ratio * scale + atol
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_gradient(f: Callable[[ParameterVector], torch.Tensor], x: ParameterVector, eps: float = 1e-5) -> np.ndarray:
    base = x.data.detach().clone()
    out = np.empty(base.numel())
    with torch.no_grad():
        for i in range(base.numel()):
            vals = []
            for sgn in (1.0, -1.0):
                xi = base.clone()
                xi[i] += sgn * eps
                v = float(f(x.with_data(xi)))
                if not np.isfinite(v):
                    raise NumericError(f"non-finite function value at coordinate {x.coordinate_name(i)}")
                vals.append(v)
            out[i] = (vals[0] - vals[1]) / (2.0 * eps)
    return out


def gradcheck(f: Callable[[ParameterVector], torch.Tensor], x: ParameterVector, eps: float = 1e-5,
              tol: float = 1e-4, name: str = "") -> GradReport:
    """Compare :func:`gradient` with central differences of step ``eps``.

    Defaults: ``eps = 1e-5``, ``tol = 1e-4`` on the relative error of
    :func:`relative_error`.
    """
    with torch.no_grad():
        y0 = float(f(x.with_data(x.data.detach())))
    if not np.isfinite(y0):
        raise NumericError("function value is not finite at the check point")
    a = gradient(f, x).numpy()
    n = numeric_gradient(f, x, eps)
    return GradReport(name, a, n, relative_error(a, n), tol)


@dataclass
class GradCase:
    """A registered differentiable op.

    ``sample(rng)`` returns ``(x, ctx)``; ``fn(x, ctx)`` evaluates the scalar.
    ``ctx`` carries whatever must stay fixed while ``x`` is perturbed
    (weights, targets).
    """

    name: str
    sample: Callable
    fn: Callable


REGISTRY: dict[str, GradCase] = {}


def register(name: str, sample: Callable):
    def deco(fn):
        REGISTRY[name] = GradCase(name, sample, fn)
        return fn

    return deco


def run_suite(points: int = 20, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
              names: list[str] | None = None) -> list[GradReport]:
    """Gradcheck every registered case at ``points`` random points.

    Returns one report per case holding the worst point.
    """
    from . import gradsuite  # noqa: F401  (registers the cases)

    reports = []
    for name, case in REGISTRY.items():
        if names and name not in names:
            continue
        rng = np.random.default_rng(seed)
        worst = None
        for _ in range(points):
            x, ctx = case.sample(rng)
            rep = gradcheck(lambda v: case.fn(v, ctx), x, eps, tol, name)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        reports.append(worst)
    return reports
