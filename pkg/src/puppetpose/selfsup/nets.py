"""Small encoder and decoder standing in for the full-size networks.

The encoder maps an image to three factors: local pose vectors (unit norm
per joint), camera extrinsics (squashed into box bounds) and a coarse
spatial appearance grid. The decoder turns an appearance grid plus the
puppet's depth-composited part maps into an image and a soft
segmentation; the part maps are concatenated at every scale and are the
decoder's only view of the pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..camera import CameraBounds
from ..geometry import Skeleton, forward_kinematics, template_local_pose, template_positions

FK_EPS = 1e-6


@dataclass
class Encoding:
    """Encoder output for a batch.

    ``v3d`` is ``(B, J, 3)`` (``None`` for the direct-regression variant),
    ``pose`` the canonical joints ``(B, J, 3)``, ``camera`` ``(B, 6)`` and
    ``a`` the appearance grid ``(B, Ch, g, g)``.
    """

    v3d: torch.Tensor | None
    pose: torch.Tensor
    camera: torch.Tensor
    a: torch.Tensor


def _block(cin: int, cout: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride, kernel // 2), nn.LeakyReLU(0.1))


class Encoder(nn.Module):
    """Four stride-2 conv blocks, then fully-connected pose and camera heads.

    Parameters
    ----------
    direct : regress canonical joints directly instead of local vectors
        followed by forward kinematics (the kinematics ablation).
    """

    def __init__(self, skeleton: Skeleton, bounds: CameraBounds, width: int = 32, channels: int = 8,
                 grid: int = 8, resolution: int = 64, direct: bool = False, hidden: int = 128):
        super().__init__()
        if resolution // 16 < 1 or resolution % 16:
            raise ValueError("resolution must be a positive multiple of 16")
        if resolution // grid not in (4, 8):
            raise ValueError("appearance grid must sit at the third or fourth conv scale")
        self.skeleton = skeleton
        self.direct = direct
        self.art = list(skeleton.articulated)
        self.trunk = nn.ModuleList([
            _block(3, width, 2), _block(width, 2 * width, 2), _block(2 * width, 2 * width, 2),
            _block(2 * width, 2 * width, 2),
        ])
        self.grid_level = 2 if resolution // grid == 8 else 1
        self.app = nn.Conv2d(2 * width, channels, 1)
        side = resolution // 16
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(2 * width * side * side, hidden), nn.LeakyReLU(0.1))
        n_pose = (skeleton.J if direct else len(self.art)) * 3
        self.pose_head = nn.Linear(hidden, n_pose)
        self.cam_head = nn.Linear(hidden, 6)
        for head in (self.pose_head, self.cam_head):
            nn.init.normal_(head.weight, std=1e-2)
            nn.init.zeros_(head.bias)
        self.register_buffer("v_base", template_local_pose(skeleton).float()[self.art])
        self.register_buffer("p_base", template_positions(skeleton).float())
        self.register_buffer("cam_lo", torch.as_tensor(bounds.low, dtype=torch.float32))
        self.register_buffer("cam_hi", torch.as_tensor(bounds.high, dtype=torch.float32))

    def forward(self, image: torch.Tensor) -> Encoding:
        h = image
        a = None
        for level, block in enumerate(self.trunk):
            h = block(h)
            if level == self.grid_level:
                a = self.app(h)
        z = self.fc(h)
        B = image.shape[0]
        camera = self.cam_lo + (self.cam_hi - self.cam_lo) * torch.sigmoid(self.cam_head(z))
        raw = self.pose_head(z)
        if self.direct:
            pose = self.p_base + raw.reshape(B, self.skeleton.J, 3)
            return Encoding(None, pose, camera, a)
        v = self.v_base + raw.reshape(B, len(self.art), 3)
        v = v / torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(1e-8)
        v3d = template_local_pose(self.skeleton).to(v.dtype).expand(B, -1, -1).clone()
        v3d[:, self.art] = v
        pose = forward_kinematics(v3d, self.skeleton, validate=False, eps=FK_EPS)
        return Encoding(v3d, pose, camera, a)


class Decoder(nn.Module):
    """Three upsample-conv blocks with the part maps concatenated at every scale.

    ``forward(a, phi_bar)`` returns ``(image, y)``: ``image`` ``(B, 3, H, W)``
    squashed into ``[0, 1]`` and ``y`` ``(B, L+1, H, W)`` softmax maps.
    """

    def __init__(self, parts: int, channels: int = 8, width: int = 32, grid: int = 8, resolution: int = 64):
        super().__init__()
        if resolution != grid * 8:
            raise ValueError("the decoder upsamples the appearance grid three times")
        k = parts + 1
        widths = [width, width, width // 2, width // 4]
        self.stem = _block(channels + k, widths[0])
        # the full-resolution block is pointwise: it only mixes features with the sharp part maps
        self.ups = nn.ModuleList([_block(widths[i] + k, widths[i + 1], kernel=3 if i < 2 else 1) for i in range(3)])
        self.image_head = nn.Conv2d(widths[3] + k, 3, 1)
        self.seg_head = nn.Conv2d(widths[3] + k, k, 1)

    @staticmethod
    def _cond(phi_bar: torch.Tensor, size: int) -> torch.Tensor:
        return F.adaptive_avg_pool2d(phi_bar, size) if phi_bar.shape[-1] != size else phi_bar

    def forward(self, a: torch.Tensor, phi_bar: torch.Tensor):
        h = self.stem(torch.cat([a, self._cond(phi_bar, a.shape[-1])], dim=1))
        for block in self.ups:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, self._cond(phi_bar, h.shape[-1])], dim=1))
        h = torch.cat([h, phi_bar], dim=1)
        image = torch.sigmoid(self.image_head(h))
        y = torch.softmax(self.seg_head(h), dim=1)
        return image, y
