"""Render a pose through the part-based puppet.

The puppet starts from one annotated template: a part-label image plus an
anchor point per joint. Each part map is warped by the similarity that
carries its anchors onto the projected joints, parts are composited with
a depth-aware soft ordering, and a flat colour per part gives an image.

Writes demo_render.png, demo_seg.png and one 16-bit map per channel into
the output directory (default: ./demo_out).

Run: python demos/02_render_puppet.py [out_dir]
"""

import math
import sys
from pathlib import Path

import numpy as np
import torch

from puppetpose.camera import CameraParams
from puppetpose.geometry import default_skeleton, forward_kinematics, random_local_pose
from puppetpose.io import PART_PALETTE, image_to_uint8, map_to_uint16, write_png
from puppetpose.puppet import default_dictionary, hard_segmentation, pose_maps, render_flat


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = default_skeleton()
    dictionary = default_dictionary()
    p = forward_kinematics(random_local_pose(np.random.default_rng(4), s, spread=0.4), s)

    # camera looking at the subject's front from four units away
    cam = CameraParams.make((0.0, math.pi / 2, math.pi / 2), (0.0, 0.0, 4.0))
    maps = pose_maps(p, cam, dictionary, out_size=128)
    print("composited channels:", tuple(maps.phi_bar.shape), "sum to one:",
          bool(torch.allclose(maps.phi_bar.sum(0), torch.ones(128, 128, dtype=maps.phi_bar.dtype))))

    colors = torch.tensor(PART_PALETTE[1 : s.L + 1], dtype=torch.float64) / 255.0
    img = render_flat(maps.phi_bar, colors, (0.5, 0.5, 0.5))
    write_png(out / "demo_render.png", image_to_uint8(img))
    labels = hard_segmentation(maps.phi_bar).numpy().astype(np.uint8)
    write_png(out / "demo_seg.png", labels, palette=PART_PALETTE)
    for c in range(maps.phi_bar.shape[0]):
        write_png(out / f"demo_phi{c:02d}.png", map_to_uint16(maps.phi_bar[c]))

    visible = sorted({int(x) for x in np.unique(labels)} - {s.L + 1})
    print("visible parts:", [s.limbs[l - 1].id for l in visible])
    print("wrote", out / "demo_render.png", "and", out / "demo_seg.png")


if __name__ == "__main__":
    main(*sys.argv[1:])
