"""Local pose vectors, forward kinematics and the canonical frame.

A pose is stored as one unit vector per joint, expressed in a frame built
from the parent limb and the body's facing direction. Forward kinematics
turns those vectors into joint positions with fixed bone lengths, and
inverse kinematics reads them back. Any world-space pose can be brought
into the canonical frame (pelvis at the origin, facing +X, unit torso).

Run: python demos/01_kinematics.py
"""

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from puppetpose.geometry import (
    align_canonical,
    bone_lengths,
    default_skeleton,
    face_vector,
    forward_kinematics,
    inverse_kinematics,
    random_local_pose,
)


def main():
    s = default_skeleton()
    rng = np.random.default_rng(0)
    print(f"skeleton: {s.J} joints, {s.L} parts, articulated joints: {len(s.articulated)}")

    # a random pose within the default spread of the template
    v = random_local_pose(rng, s)
    p = forward_kinematics(v, s)
    print("face vector of the canonical pose:", face_vector(p, s).numpy().round(6))
    print("pelvis position:", p[s.pelvis].numpy().round(6))

    # bone lengths are constants of the skeleton, whatever the local vectors are
    print("bone lengths (first five):", bone_lengths(p, s).numpy()[:5].round(4))

    # inverse kinematics recovers the local vectors
    v_back = inverse_kinematics(p, s)
    art = list(s.articulated)
    print("IK(FK(v)) max error:", float((v_back[art] - v[art]).abs().max()))

    # a world pose: rotate, scale to millimetres and move it somewhere else
    R = torch.from_numpy(Rotation.random(random_state=1).as_matrix())
    world = 480.0 * p @ R.T + torch.tensor([1200.0, -300.0, 900.0], dtype=torch.float64)
    back = align_canonical(world, s)
    print("align_canonical recovers the canonical pose to", float((back - p).abs().max()))


if __name__ == "__main__":
    main()
