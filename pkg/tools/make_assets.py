"""Regenerate the shipped template and pose bank under src/puppetpose/data."""

import json
from pathlib import Path

import numpy as np

from puppetpose.geometry import default_skeleton
from puppetpose.io import save_template
from puppetpose.posebank import synthesize_world_poses
from puppetpose.template import draw_template

DATA = Path(__file__).resolve().parents[1] / "src" / "puppetpose" / "data"

if __name__ == "__main__":
    s = default_skeleton()
    label, anchors = draw_template(s)
    save_template(DATA, label, anchors, s)
    world = synthesize_world_poses(np.random.default_rng(20200), 1000, s)
    doc = {"joints": list(s.joints), "units": "mm", "frames": np.round(world, 4).tolist()}
    (DATA / "posebank.json").write_text(json.dumps(doc, separators=(",", ":")))
    print("template parts:", {l.id: int((label == i + 1).sum()) for i, l in enumerate(s.limbs)})
