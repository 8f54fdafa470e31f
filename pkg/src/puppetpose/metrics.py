"""Similarity-aligned pose errors, PCK/AUC and segmentation F1.

Poses are ``(J, 3)`` arrays (or ``(N, J, 3)`` for the batch helpers). All
functions work in numpy double precision and never touch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

MM_PER_UNIT = 480.0
PCK_THRESHOLD_MM = 150.0
AUC_STEPS = 31


@dataclass
class MetricReport:
    """Per-sample values of one metric and their arithmetic mean."""

    name: str
    values: np.ndarray
    alignment: str = "similarity"
    mean: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mean = float(self.values.mean()) if self.values.size else float("nan")

    def to_dict(self) -> dict:
        return {"metric": self.name, "alignment": self.alignment, "mean": self.mean,
                "values": self.values.tolist()}


def _points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidInputError(f"{name} must be (J, 3), got {a.shape}")
    if not np.isfinite(a).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def procrustes_align(P, Q, rank_tol: float = 1e-10):
    """Similarity ``(s, R, t)`` minimizing ``sum ||s R P_i + t - Q_i||^2``.

    Closed form from the SVD of the centred cross-covariance; the sign of
    the smallest singular direction is flipped when needed so ``R`` is a
    proper rotation.

    Raises
    ------
    DegenerateInputError
        If ``P`` has fewer than three points or is collinear (the rotation
        about the line is then undetermined).
    """
    P, Q = _points(P, "P"), _points(Q, "Q")
    if P.shape != Q.shape:
        raise InvalidInputError(f"point sets differ in shape: {P.shape} vs {Q.shape}")
    if P.shape[0] < 3:
        raise DegenerateInputError("alignment needs at least 3 points")
    mp, mq = P.mean(0), Q.mean(0)
    Pc, Qc = P - mp, Q - mq
    var_p = (Pc * Pc).sum()
    sv_p = np.linalg.svd(Pc, compute_uv=False)
    if var_p <= 0 or sv_p[1] <= rank_tol * max(sv_p[0], 1e-300):
        raise DegenerateInputError("point set is collinear or collapsed; rotation is undetermined")
    U, S, Vt = np.linalg.svd(Qc.T @ Pc)
    D = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float((S * D).sum() / var_p)
    t = mq - s * R @ mp
    return s, R, t


def apply_similarity(P, s: float, R, t) -> np.ndarray:
    return s * np.asarray(P, dtype=np.float64) @ np.asarray(R).T + np.asarray(t)


def aligned_errors(pred, gt) -> np.ndarray:
    """Per-joint distances after aligning ``pred`` onto ``gt``."""
    pred, gt = _points(pred, "pred"), _points(gt, "gt")
    s, R, t = procrustes_align(pred, gt)
    return np.linalg.norm(apply_similarity(pred, s, R, t) - gt, axis=1)


def mpjpe_pa(pred, gt) -> float:
    """Mean per-joint position error after similarity alignment."""
    return float(aligned_errors(pred, gt).mean())


def default_pck_threshold(mm_per_unit: float = MM_PER_UNIT) -> float:
    """The 150 mm convention expressed in normalized units."""
    return PCK_THRESHOLD_MM / mm_per_unit


def pck3d(pred, gt, thr: float | None = None) -> float:
    """Fraction of aligned joints with error below ``thr`` (normalized units)."""
    thr = default_pck_threshold() if thr is None else float(thr)
    if thr < 0:
        raise InvalidInputError("threshold must be non-negative")
    return float((aligned_errors(pred, gt) < thr).mean())


def auc(pred, gt, thr_max: float | None = None, steps: int = AUC_STEPS) -> float:
    """Mean PCK over ``steps`` thresholds evenly spaced on ``[0, thr_max]``."""
    thr_max = default_pck_threshold() if thr_max is None else float(thr_max)
    err = aligned_errors(pred, gt)
    thrs = np.linspace(0.0, thr_max, steps)
    return float(np.mean([(err < th).mean() for th in thrs]))


def pose_report(preds, gts, name: str = "mpjpe_pa") -> MetricReport:
    """Batch version of :func:`mpjpe_pa` (``(N, J, 3)`` inputs)."""
    preds, gts = np.asarray(preds, dtype=np.float64), np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3:
        raise InvalidInputError("pose batches must both be (N, J, 3)")
    return MetricReport(name, np.array([mpjpe_pa(p, g) for p, g in zip(preds, gts)]))


def _f1(pred: np.ndarray, gt: np.ndarray) -> float:
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def seg_f1(pred, gt, background: int) -> tuple[float, float]:
    """Foreground-vs-background F1 and macro part F1.

    The part mean runs over labels other than ``background`` present in
    ``gt``; it is NaN when ``gt`` has no foreground. Two empty foregrounds
    score 1.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"segmentations differ in shape: {pred.shape} vs {gt.shape}")
    fg = _f1(pred != background, gt != background)
    parts = [l for l in np.unique(gt) if l != background]
    part = float(np.mean([_f1(pred == l, gt == l) for l in parts])) if parts else float("nan")
    return fg, part
