import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import fk_oracle, gram_schmidt_frame
from puppetpose.errors import DegenerateFrameError, DegenerateInputError, InvalidInputError, SchemaError
from puppetpose.geometry import (
    Skeleton,
    align_canonical,
    bone_lengths,
    face_vector,
    forward_kinematics,
    inverse_kinematics,
    parent_frame,
    random_local_pose,
    template_local_pose,
    template_positions,
)


def _bone_targets(s):
    return torch.tensor([s.limb_lengths[j] for j in range(s.J) if s.parents[j] >= 0], dtype=torch.float64)


class TestSkeleton:
    def test_default_shape(self, skeleton):
        assert skeleton.J == 17 and skeleton.L == 10
        assert skeleton.parents[skeleton.pelvis] < 0

    def test_round_trip_dict(self, skeleton):
        s2 = Skeleton.from_dict(skeleton.to_dict())
        assert s2.joints == skeleton.joints and s2.parents == skeleton.parents
        np.testing.assert_array_equal(s2.limb_lengths, skeleton.limb_lengths)

    def test_cycle_rejected(self, skeleton):
        d = skeleton.to_dict()
        d["parents"][1] = "rknee"
        d["parents"][2] = "rhip"
        with pytest.raises(SchemaError, match="cycle|root"):
            Skeleton.from_dict(d)

    def test_nonpositive_length_rejected(self, skeleton):
        d = skeleton.to_dict()
        d["limb_lengths"][3] = 0.0
        with pytest.raises(SchemaError, match="positive"):
            Skeleton.from_dict(d)

    def test_unknown_joint_rejected(self, skeleton):
        d = skeleton.to_dict()
        d["limbs"][0]["joints"] = ["nose", "tail"]
        with pytest.raises(SchemaError, match="tail"):
            Skeleton.from_dict(d)

    def test_mirror_permutations_are_involutions(self, skeleton):
        jp = skeleton.mirror_permutation()
        lp = skeleton.limb_mirror_permutation()
        np.testing.assert_array_equal(jp[jp], np.arange(skeleton.J))
        np.testing.assert_array_equal(lp[lp], np.arange(skeleton.L))


class TestFaceVector:
    def test_hand_example(self, skeleton):
        p = torch.zeros(skeleton.J, 3, dtype=torch.float64)
        p[skeleton.neck] = torch.tensor([0.0, 0.0, 1.0])
        p[skeleton.lhip] = torch.tensor([0.0, 0.2, 0.0])
        p[skeleton.rhip] = torch.tensor([0.0, -0.2, 0.0])
        # (lhip - rhip) x (neck - pelvis) = (0, 0.4, 0) x (0, 0, 1) = (0.4, 0, 0)
        np.testing.assert_allclose(face_vector(p, skeleton).numpy(), [1.0, 0.0, 0.0], atol=1e-12)

    def test_equivariance(self, skeleton):
        p = template_positions(skeleton)
        f0 = face_vector(p, skeleton)
        for R in Rotation.random(50, random_state=3).as_matrix():
            R = torch.from_numpy(R)
            np.testing.assert_allclose(face_vector(p @ R.T, skeleton).numpy(), (R @ f0).numpy(), atol=1e-12)

    def test_collinear(self, skeleton):
        p = torch.zeros(skeleton.J, 3, dtype=torch.float64)
        p[skeleton.neck] = torch.tensor([0.0, 0.0, 1.0])
        p[skeleton.lhip] = torch.tensor([0.0, 0.0, 0.5])
        p[skeleton.rhip] = torch.tensor([0.0, 0.0, -0.5])
        with pytest.raises(DegenerateInputError):
            face_vector(p, skeleton)


class TestParentFrame:
    def _pose_with_parent_limb(self, skeleton, direction):
        p = template_positions(skeleton).clone()
        j = skeleton.index("lelbow")
        par, gp = skeleton.parents[j], skeleton.parents[skeleton.parents[j]]
        p[par] = p[gp] + torch.tensor(direction, dtype=torch.float64)
        return p, j

    def test_parallel_to_face_is_degenerate(self, skeleton):
        p, j = self._pose_with_parent_limb(skeleton, [0.3, 0.0, 0.0])
        with pytest.raises(DegenerateFrameError):
            parent_frame(p, j, skeleton)

    def test_hand_gram_schmidt(self, skeleton):
        p, j = self._pose_with_parent_limb(skeleton, [0.0, 0.0, 0.3])
        R = parent_frame(p, j, skeleton).numpy()
        # columns: e_z, e_x, e_z x e_x = e_y
        np.testing.assert_allclose(R, np.column_stack([[0, 0, 1], [1, 0, 0], [0, 1, 0]]), atol=1e-12)

    def test_orthonormal_right_handed(self, skeleton, rng):
        for _ in range(100):
            p = forward_kinematics(random_local_pose(rng, skeleton), skeleton)
            j = int(rng.choice(list(skeleton.articulated)))
            R = parent_frame(p, j, skeleton)
            np.testing.assert_allclose((R.T @ R).numpy(), np.eye(3), atol=1e-12)
            assert torch.det(R) == pytest.approx(1.0, abs=1e-12)


class TestForwardKinematics:
    def test_template_fixed_point(self, skeleton):
        p = forward_kinematics(template_local_pose(skeleton), skeleton)
        np.testing.assert_allclose(p.numpy(), skeleton.template_pose, atol=1e-12)

    def test_canonical_invariants(self, skeleton, rng):
        v = random_local_pose(rng, skeleton, n=50)
        p = forward_kinematics(v, skeleton)
        assert p[:, skeleton.pelvis].abs().max() < 1e-9
        f = face_vector(p, skeleton)
        np.testing.assert_allclose(f.numpy(), np.tile([1.0, 0.0, 0.0], (50, 1)), atol=1e-9)
        np.testing.assert_allclose(bone_lengths(p, skeleton).numpy(),
                                   np.tile(_bone_targets(skeleton).numpy(), (50, 1)), atol=1e-9)

    def test_matches_frame_composition_oracle(self, skeleton, rng):
        for _ in range(20):
            v = random_local_pose(rng, skeleton)
            np.testing.assert_allclose(forward_kinematics(v, skeleton).numpy(), fk_oracle(v.numpy(), skeleton),
                                       atol=1e-12)

    def test_two_link_chain_by_hand(self, skeleton):
        # lshoulder -> lelbow -> lwrist hang off the neck; set both local vectors to +X of their frames
        s = skeleton
        v = template_local_pose(s).clone()
        sh, el, wr = s.index("lshoulder"), s.index("lelbow"), s.index("lwrist")
        v[el] = torch.tensor([1.0, 0.0, 0.0])
        v[wr] = torch.tensor([1.0, 0.0, 0.0])
        p = forward_kinematics(v, s).numpy()
        t = s.template_pose
        face = np.array([1.0, 0.0, 0.0])
        R1 = gram_schmidt_frame(t[sh] - t[s.neck], face)
        elbow = t[sh] + s.limb_lengths[el] * R1[:, 0]
        R2 = gram_schmidt_frame(elbow - t[sh], face)
        wrist = elbow + s.limb_lengths[wr] * R2[:, 0]
        np.testing.assert_allclose(p[el], elbow, atol=1e-12)
        np.testing.assert_allclose(p[wr], wrist, atol=1e-12)
        # the first axis of each frame is the parent limb, so the chain is straight
        np.testing.assert_allclose(np.cross(wrist - elbow, elbow - t[sh]), 0.0, atol=1e-12)

    def test_non_unit_rejected(self, skeleton):
        v = template_local_pose(skeleton).clone()
        v[skeleton.articulated[0]] *= 1.01
        with pytest.raises(InvalidInputError):
            forward_kinematics(v, skeleton)

    def test_batched_matches_loop(self, skeleton, rng):
        v = random_local_pose(rng, skeleton, n=4)
        batched = forward_kinematics(v, skeleton)
        for i in range(4):
            np.testing.assert_allclose(batched[i].numpy(), forward_kinematics(v[i], skeleton).numpy(), atol=1e-14)


class TestInverseKinematics:
    def test_round_trips(self, skeleton, rng):
        v = random_local_pose(rng, skeleton, n=100)
        v2 = inverse_kinematics(forward_kinematics(v, skeleton), skeleton)
        art = list(skeleton.articulated)
        np.testing.assert_allclose(v2[:, art].numpy(), v[:, art].numpy(), atol=1e-9)

    def test_template_exact(self, skeleton):
        p = template_positions(skeleton)
        np.testing.assert_allclose(forward_kinematics(inverse_kinematics(p, skeleton), skeleton).numpy(),
                                   p.numpy(), atol=1e-12)

    def test_mismatched_lengths_keep_directions(self, skeleton, rng):
        p = forward_kinematics(random_local_pose(rng, skeleton), skeleton)
        stretched = p.clone()
        # lengthen every articulated bone by a per-bone factor, root to leaf
        for j in skeleton.articulated:
            par = skeleton.parents[j]
            stretched[j] = stretched[par] + (p[j] - p[par]) * (1.0 + 0.5 * rng.random())
        p2 = forward_kinematics(inverse_kinematics(stretched, skeleton), skeleton)
        np.testing.assert_allclose(bone_lengths(p2, skeleton).numpy(), _bone_targets(skeleton).numpy(), atol=1e-9)
        for j in skeleton.articulated:
            par = skeleton.parents[j]
            d_in = (stretched[j] - stretched[par]) / torch.linalg.norm(stretched[j] - stretched[par])
            d_out = (p2[j] - p2[par]) / torch.linalg.norm(p2[j] - p2[par])
            np.testing.assert_allclose(d_out.numpy(), d_in.numpy(), atol=1e-9)


class TestAlignCanonical:
    def test_idempotent(self, skeleton, rng):
        p = forward_kinematics(random_local_pose(rng, skeleton), skeleton)
        np.testing.assert_allclose(align_canonical(p, skeleton).numpy(), p.numpy(), atol=1e-9)

    def test_rigid_invariance(self, skeleton, rng):
        p = forward_kinematics(random_local_pose(rng, skeleton), skeleton)
        R = torch.from_numpy(Rotation.random(random_state=7).as_matrix())
        w = p @ R.T + torch.tensor([3.0, -1.0, 2.0], dtype=torch.float64)
        np.testing.assert_allclose(align_canonical(w, skeleton).numpy(), p.numpy(), atol=1e-6)

    def test_millimetre_input(self, skeleton):
        w = template_positions(skeleton) * 480.0 + 1000.0
        out = align_canonical(w, skeleton)
        assert torch.linalg.norm(out[skeleton.neck] - out[skeleton.pelvis]) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_torso(self, skeleton):
        w = template_positions(skeleton).clone()
        w[skeleton.neck] = w[skeleton.pelvis]
        with pytest.raises(DegenerateInputError):
            align_canonical(w, skeleton)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_align_canonical_similarity_invariance_property(seed, scale):
    from puppetpose.geometry import default_skeleton

    s = default_skeleton()
    rng = np.random.default_rng(seed)
    p = forward_kinematics(random_local_pose(rng, s, spread=0.5), s)
    R = torch.from_numpy(Rotation.random(random_state=seed).as_matrix())
    w = scale * p @ R.T + torch.from_numpy(rng.normal(size=3))
    np.testing.assert_allclose(align_canonical(w, s).numpy(), p.numpy(), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fk_bone_lengths_property(seed):
    from puppetpose.geometry import default_skeleton

    s = default_skeleton()
    p = forward_kinematics(random_local_pose(np.random.default_rng(seed), s), s)
    np.testing.assert_allclose(bone_lengths(p, s).numpy(), _bone_targets(s).numpy(), atol=1e-9)
