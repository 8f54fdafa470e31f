"""Synthetic paired-frame corpus rendered with the puppet itself.

Each pair shows one subject (one part-colour palette) in two poses, under
two cameras, over two different backgrounds. The saliency mask of the
target frame comes from its difference to the known background, the way a
fixed-camera rig would obtain it. Ground truth (local pose, camera, hard
segmentation) is stored for evaluation only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from ..camera import CameraBounds, CameraParams, project, sample_camera
from ..config import PuppetConfig
from ..geometry import inverse_kinematics
from ..io import PoseBank
from ..puppet import PartDictionary, hard_segmentation, maps_from_projection, render_flat

SALIENCY_THRESHOLD = 0.02
SALIENCY_DILATION = 1
SALIENCY_BLUR = 0.7


@dataclass
class SynthConfig:
    """Knobs of the generator; camera bounds come from the caller."""

    resolution: int = 64
    bounds: CameraBounds = CameraBounds()
    bg_noise: float = 0.03
    f: float = 1.2


@dataclass
class SynthSample:
    """One source/target pair plus per-frame ground truth.

    Images are ``(3, H, W)`` in ``[0, 1]``; ``labels_*`` are ``(H, W)`` in
    ``1..L+1``; ``v3d_*`` and ``pose_*`` are ``(J, 3)``; ``camera_*`` is a
    6-vector.
    """

    I_s: torch.Tensor
    I_t: torch.Tensor
    m_sal: torch.Tensor
    colors: torch.Tensor
    v3d_s: torch.Tensor
    v3d_t: torch.Tensor
    pose_s: torch.Tensor
    pose_t: torch.Tensor
    camera_s: torch.Tensor
    camera_t: torch.Tensor
    labels_s: torch.Tensor
    labels_t: torch.Tensor


def background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    """Flat colour with pixel noise, or a linear gradient between two colours."""
    if rng.random() < 0.5:
        img = np.broadcast_to(rng.uniform(0.0, 1.0, (3, 1, 1)), (3, size, size)).copy()
        img += rng.normal(scale=noise, size=img.shape)
    else:
        a, b = rng.uniform(0.0, 1.0, (2, 3, 1, 1))
        theta = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
        t = 0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5))
        img = a + (b - a) * np.clip(t, 0.0, 1.0)[None]
    return np.clip(img, 0.0, 1.0)


def saliency_from_background(image: np.ndarray, bg: np.ndarray, threshold: float = SALIENCY_THRESHOLD,
                             dilation: int = SALIENCY_DILATION, blur: float = SALIENCY_BLUR) -> np.ndarray:
    """Threshold ``max_c |image - bg|``, grow by ``dilation`` pixels, then blur."""
    mask = np.abs(image - bg).max(axis=0) > threshold
    if dilation > 0:
        mask = ndimage.binary_dilation(mask, iterations=dilation)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), blur) if blur > 0 else mask.astype(np.float64)
    return np.clip(soft, 0.0, 1.0)


def _render(pose: torch.Tensor, cam: CameraParams, colors: torch.Tensor, bg: np.ndarray,
            dictionary: PartDictionary, puppet: PuppetConfig, cfg: SynthConfig):
    q, qd = project(pose, cam, cfg.f)
    maps = maps_from_projection(q, qd, dictionary, puppet, cfg.resolution)
    flat = render_flat(maps.phi_bar, colors, bg_color=(0.0, 0.0, 0.0))
    # the background channel's weight carries the backdrop image instead of a flat colour
    img = flat + maps.phi_bar[-1:] * torch.from_numpy(bg)
    return img.clamp(0.0, 1.0), hard_segmentation(maps.phi_bar)


def generate_pair(rng: np.random.Generator, pose_bank: PoseBank, dictionary: PartDictionary,
                  cfg: SynthConfig | None = None, puppet: PuppetConfig | None = None) -> SynthSample:
    """Draw two bank poses and cameras, one palette, two backgrounds; render both frames."""
    cfg = cfg or SynthConfig()
    puppet = puppet or PuppetConfig()
    s = dictionary.skeleton
    colors = torch.from_numpy(rng.uniform(0.05, 0.95, (s.L, 3)))
    frames = []
    for _ in range(2):
        pose = pose_bank.canonical[int(rng.integers(len(pose_bank)))]
        cam = sample_camera(rng, cfg.bounds, pose, cfg.f)
        bg = background(rng, cfg.resolution, cfg.bg_noise)
        img, labels = _render(pose, cam, colors, bg, dictionary, puppet, cfg)
        frames.append((pose, cam, bg, img, labels))
    (p_s, c_s, _, I_s, y_s), (p_t, c_t, bg_t, I_t, y_t) = frames
    m_sal = torch.from_numpy(saliency_from_background(I_t.numpy(), bg_t))
    return SynthSample(
        I_s=I_s, I_t=I_t, m_sal=m_sal, colors=colors,
        v3d_s=inverse_kinematics(p_s, s), v3d_t=inverse_kinematics(p_t, s),
        pose_s=p_s.clone(), pose_t=p_t.clone(),
        camera_s=c_s.vector.clone(), camera_t=c_t.vector.clone(),
        labels_s=y_s, labels_t=y_t,
    )


@dataclass
class Corpus:
    """Stacked pairs: every field of :class:`SynthSample` with a leading ``N``."""

    I_s: torch.Tensor
    I_t: torch.Tensor
    m_sal: torch.Tensor
    colors: torch.Tensor
    v3d_s: torch.Tensor
    v3d_t: torch.Tensor
    pose_s: torch.Tensor
    pose_t: torch.Tensor
    camera_s: torch.Tensor
    camera_t: torch.Tensor
    labels_s: torch.Tensor
    labels_t: torch.Tensor

    def __len__(self) -> int:
        return self.I_s.shape[0]

    def subset(self, idx) -> "Corpus":
        idx = torch.as_tensor(idx)
        return Corpus(**{k: v[idx] for k, v in vars(self).items()})


def generate_corpus(rng: np.random.Generator, n: int, pose_bank: PoseBank, dictionary: PartDictionary,
                    cfg: SynthConfig | None = None, puppet: PuppetConfig | None = None) -> Corpus:
    """``n`` pairs from :func:`generate_pair`, drawn in sequence from ``rng``."""
    samples = [generate_pair(rng, pose_bank, dictionary, cfg, puppet) for _ in range(n)]
    fields = vars(samples[0]).keys()
    return Corpus(**{k: torch.stack([getattr(x, k) for x in samples]) for k in fields})
