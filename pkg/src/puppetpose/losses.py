"""Self-supervision objectives and re-encoding energies.

Images are ``(..., 3, H, W)``, single-channel maps ``(..., H, W)`` and soft
segmentations ``(..., L+1, H, W)`` with background last. Every loss is a
mean over pixels (and colour channels, and batch) so weights do not depend
on resolution.
"""

from __future__ import annotations

import torch

from .errors import InvalidInputError
from .geometry import as_tensor

LOG_FLOOR = 1e-12


def _same_shape(*ts):
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise InvalidInputError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def recon_uncertain(I_hat, I_t, y_bg, m_sal, beta: float = 0.5) -> torch.Tensor:
    """``mean((1 - y_bg + beta * m_sal) * |I_hat - I_t|)``."""
    I_hat, I_t = as_tensor(I_hat), as_tensor(I_t)
    y_bg, m_sal = as_tensor(y_bg), as_tensor(m_sal)
    _same_shape(I_hat, I_t)
    _same_shape(y_bg, m_sal)
    if y_bg.shape != I_hat.shape[:-3] + I_hat.shape[-2:]:
        raise InvalidInputError("weight maps must match the image's spatial shape")
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    w = (1.0 - y_bg + beta * m_sal).unsqueeze(-3)
    return (w * (I_hat - I_t).abs()).mean()


def recon_certain(I_s, I_t, w_fg, bg_color=(0.5, 0.5, 0.5)) -> torch.Tensor:
    """``mean(w_fg * |I_s - I_t| + (1 - w_fg) * |I_s - BG|)``."""
    I_s, I_t, w_fg = as_tensor(I_s), as_tensor(I_t), as_tensor(w_fg)
    _same_shape(I_s, I_t)
    if w_fg.shape != I_s.shape[:-3] + I_s.shape[-2:]:
        raise InvalidInputError("w_fg must match the image's spatial shape")
    bg = as_tensor(bg_color, I_s).to(I_s.dtype).reshape(3, 1, 1)
    w = w_fg.unsqueeze(-3)
    return (w * (I_s - I_t).abs() + (1.0 - w) * (I_s - bg).abs()).mean()


def cross_entropy_map(y_hat, labels) -> torch.Tensor:
    """Per-pixel ``-log y_hat[label]`` with labels in ``1..L+1``."""
    idx = (torch.as_tensor(labels).long() - 1).unsqueeze(-3)
    picked = torch.gather(y_hat, -3, idx).squeeze(-3)
    return -torch.log(picked.clamp_min(LOG_FLOOR))


def self_entropy_map(y_hat) -> torch.Tensor:
    return -(y_hat * torch.log(y_hat.clamp_min(LOG_FLOOR))).sum(-3)


def seg_consistency(y_hat, labels, w_unc, norm_tol: float = 1e-4) -> torch.Tensor:
    """Cross-entropy to ``labels`` where certain, self-entropy where uncertain."""
    y_hat, w_unc = as_tensor(y_hat), as_tensor(w_unc)
    labels = torch.as_tensor(labels)
    if labels.shape != y_hat.shape[:-3] + y_hat.shape[-2:] or w_unc.shape != labels.shape:
        raise InvalidInputError("labels and w_unc must match the segmentation's spatial shape")
    err = (y_hat.detach().sum(-3) - 1.0).abs().max()
    if float(err) > norm_tol:
        raise InvalidInputError(f"soft segmentation is not normalized (max deviation {float(err):.3g})")
    per_pixel = (1.0 - w_unc) * cross_entropy_map(y_hat, labels) + w_unc * self_entropy_map(y_hat)
    return per_pixel.mean()


def energy_pose(p_z, p_hat) -> torch.Tensor:
    """Mean absolute coordinate difference between two poses."""
    p_z, p_hat = as_tensor(p_z), as_tensor(p_hat)
    _same_shape(p_z, p_hat)
    return (p_z - p_hat).abs().mean()


def energy_appearance(a, a_hat) -> torch.Tensor:
    a, a_hat = as_tensor(a), as_tensor(a_hat)
    _same_shape(a, a_hat)
    return (a - a_hat).abs().mean()
