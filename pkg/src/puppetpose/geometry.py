"""Skeleton, canonical frame and forward/inverse kinematics.

Conventions
-----------
Canonical frame: X points out of the chest (the face-vector), Y to the body's
left, Z up. The pelvis sits at the origin and the pelvis-neck distance is the
unit of length.

A *local pose* ``v`` holds one unit vector per joint. For every articulated
joint the vector is expressed in the Gram-Schmidt frame of its parent limb;
rigid joints (the four torso joints plus any extra ``rigid_joints``) are pinned
to the template and their rows only carry the canonical parent-to-joint
direction.

All functions take ``(..., J, 3)`` tensors and are differentiable with torch
autograd. numpy input is accepted and promoted to float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateFrameError, DegenerateInputError, InvalidInputError, SchemaError

DEGENERATE_EPS = 1e-7
UNIT_TOL = 1e-9


def as_tensor(x, like=None) -> torch.Tensor:
    """Promote arrays to float64 tensors; floating tensors keep their dtype."""
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass(frozen=True)
class Limb:
    id: str
    joints: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint topology plus the constant bone-length array used by FK.

    ``limb_lengths[j]`` is the distance from joint ``j`` to its parent.
    """

    joints: tuple[str, ...]
    parents: tuple[int, ...]
    limbs: tuple[Limb, ...]
    limb_lengths: np.ndarray
    torso_joints: tuple[int, ...]
    template_pose: np.ndarray
    rigid_joints: tuple[int, ...] = ()
    mirror: dict = field(default_factory=dict)

    def __post_init__(self):
        J = len(self.joints)
        if len(self.parents) != J or len(self.limb_lengths) != J:
            raise SchemaError("joints, parents and limb_lengths must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise SchemaError(f"expected exactly one root joint, found {len(roots)}")
        # every chain must reach the root without revisiting a joint
        for j in range(J):
            seen, k = set(), j
            while self.parents[k] >= 0:
                if k in seen:
                    raise SchemaError(f"cycle in parent map through joint {self.joints[j]!r}")
                seen.add(k)
                k = self.parents[k]
        for j in range(J):
            if j != roots[0] and not self.limb_lengths[j] > 0:
                raise SchemaError(f"limb length of {self.joints[j]!r} must be positive")
        if len(self.torso_joints) != 4:
            raise SchemaError("torso_joints must name pelvis, neck, left hip and right hip")
        if self.torso_joints[0] != roots[0]:
            raise SchemaError("the first torso joint must be the root (pelvis)")
        in_limb = {j for limb in self.limbs for j in limb.joints}
        for j in range(J):
            if j not in self.fixed_joints and j not in in_limb:
                raise SchemaError(f"articulated joint {self.joints[j]!r} belongs to no limb")
        if self.template_pose.shape != (J, 3):
            raise SchemaError("template_pose must be J x 3")

    @property
    def J(self) -> int:
        return len(self.joints)

    @property
    def L(self) -> int:
        return len(self.limbs)

    @property
    def root(self) -> int:
        return self.torso_joints[0]

    @property
    def pelvis(self) -> int:
        return self.torso_joints[0]

    @property
    def neck(self) -> int:
        return self.torso_joints[1]

    @property
    def lhip(self) -> int:
        return self.torso_joints[2]

    @property
    def rhip(self) -> int:
        return self.torso_joints[3]

    @property
    def fixed_joints(self) -> tuple[int, ...]:
        return tuple(self.torso_joints) + tuple(j for j in self.rigid_joints if j not in self.torso_joints)

    @property
    def articulated(self) -> tuple[int, ...]:
        """Non-rigid joints in root-to-leaf order."""
        fixed = set(self.fixed_joints)
        order = []
        depth = {}
        for j in range(self.J):
            d, k = 0, j
            while self.parents[k] >= 0:
                d, k = d + 1, self.parents[k]
            depth[j] = d
        for j in sorted(range(self.J), key=lambda j: (depth[j], j)):
            if j not in fixed:
                order.append(j)
        return tuple(order)

    def index(self, name: str) -> int:
        return self.joints.index(name)

    def mirror_permutation(self) -> np.ndarray:
        """Joint permutation swapping left and right."""
        perm = np.arange(self.J)
        for a, b in self.mirror.items():
            ia, ib = self.index(a), self.index(b)
            perm[ia], perm[ib] = ib, ia
        return perm

    def limb_mirror_permutation(self) -> np.ndarray:
        jperm = self.mirror_permutation()
        keys = [tuple(sorted(limb.joints)) for limb in self.limbs]
        perm = np.arange(self.L)
        for l, limb in enumerate(self.limbs):
            target = tuple(sorted(int(jperm[j]) for j in limb.joints))
            perm[l] = keys.index(target)
        return perm

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        try:
            names = tuple(d["joints"])
            idx = {n: i for i, n in enumerate(names)}

            def ref(n):
                if n not in idx:
                    raise SchemaError(f"unknown joint {n!r}")
                return idx[n]

            parents = tuple(-1 if p is None else (p if isinstance(p, int) else ref(p)) for p in d["parents"])
            limbs = tuple(
                Limb(str(l["id"]), tuple(ref(j) for j in (l["joints"] if "joints" in l else (l["j1"], l["j2"]))))
                for l in d["limbs"]
            )
            return cls(
                joints=names,
                parents=parents,
                limbs=limbs,
                limb_lengths=np.asarray(d["limb_lengths"], dtype=np.float64),
                torso_joints=tuple(ref(j) for j in d["torso_joints"]),
                template_pose=np.asarray(d["template_pose"], dtype=np.float64),
                rigid_joints=tuple(ref(j) for j in d.get("rigid_joints", [])),
                mirror=dict(d.get("mirror", {})),
            )
        except KeyError as exc:
            raise SchemaError(f"skeleton file is missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        n = self.joints
        return {
            "joints": list(n),
            "parents": [None if p < 0 else n[p] for p in self.parents],
            "limbs": [{"id": l.id, "joints": [n[j] for j in l.joints]} for l in self.limbs],
            "limb_lengths": self.limb_lengths.tolist(),
            "torso_joints": [n[j] for j in self.torso_joints],
            "rigid_joints": [n[j] for j in self.rigid_joints],
            "mirror": dict(self.mirror),
            "template_pose": self.template_pose.tolist(),
        }

    @classmethod
    def load(cls, path) -> "Skeleton":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


_DEFAULT = None


def default_skeleton() -> Skeleton:
    """The shipped 17-joint H3.6M-style skeleton."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("puppetpose.data").joinpath("skeleton.json").read_text()
        _DEFAULT = Skeleton.from_dict(json.loads(text))
    return _DEFAULT


def _normalize(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if eps:
        n = torch.sqrt(n * n + eps * eps)
    return x / n


def face_vector(p, skeleton: Skeleton | None = None, check: bool = True) -> torch.Tensor:
    """Unit normal of the plane through neck, left hip and right hip.

    Oriented so that it has a positive dot product with
    ``(lhip - rhip) x (neck - pelvis)``, i.e. it points out of the chest.
    """
    s = skeleton or default_skeleton()
    p = as_tensor(p)
    neck, lhip, rhip, pelvis = p[..., s.neck, :], p[..., s.lhip, :], p[..., s.rhip, :], p[..., s.pelvis, :]
    n = torch.linalg.cross(lhip - rhip, neck - rhip)
    norm = torch.linalg.vector_norm(n, dim=-1, keepdim=True)
    if check and bool((norm < DEGENERATE_EPS).any()):
        raise DegenerateInputError("neck, left hip and right hip are collinear")
    ref = torch.linalg.cross(lhip - rhip, neck - pelvis)
    sign = torch.where((n * ref).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(n.dtype)
    return sign * n / norm.clamp_min(1e-12)


def _frame(parent_limb: torch.Tensor, face: torch.Tensor, check: bool, eps: float = 0.0) -> torch.Tensor:
    n1 = torch.linalg.vector_norm(parent_limb, dim=-1, keepdim=True)
    if check and bool((n1 < DEGENERATE_EPS).any()):
        raise DegenerateFrameError("parent limb has zero length")
    a1 = parent_limb / (torch.sqrt(n1 * n1 + eps * eps) if eps else n1)
    r = face - (face * a1).sum(-1, keepdim=True) * a1
    n2 = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if check and bool((n2 < DEGENERATE_EPS).any()):
        raise DegenerateFrameError("face-vector is parallel to the parent limb")
    a2 = r / (torch.sqrt(n2 * n2 + eps * eps) if eps else n2)
    a3 = torch.linalg.cross(a1, a2)
    return torch.stack([a1, a2, a3], dim=-1)


def _grandparent_limb(p, j: int, s: Skeleton):
    par = s.parents[j]
    if par < 0 or s.parents[par] < 0:
        raise DegenerateFrameError(f"joint {s.joints[j]!r} has no parent limb")
    return p[..., par, :] - p[..., s.parents[par], :]


def parent_frame(p, j: int, skeleton: Skeleton | None = None, face=None, check: bool = True) -> torch.Tensor:
    """Orthonormal right-handed frame of ``j``'s parent limb.

    Columns: the normalized parent-limb vector, the face-vector component
    orthogonal to it, and their cross product.
    """
    s = skeleton or default_skeleton()
    p = as_tensor(p)
    if face is None:
        face = face_vector(p, s, check=check)
    return _frame(_grandparent_limb(p, j, s), face, check)


def template_positions(skeleton: Skeleton, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(skeleton.template_pose, dtype=torch.float64)
    if like is not None:
        t = t.to(like.dtype)
    return t


def forward_kinematics(v, skeleton: Skeleton | None = None, validate: bool = True, eps: float = 0.0) -> torch.Tensor:
    """Place joints root-to-leaf from parent-relative unit vectors.

    Parameters
    ----------
    v : (..., J, 3) local pose.
    validate : check unit norms and frame degeneracy (raise on failure).
        Training code passes ``validate=False`` together with a small ``eps``
        so that a collapsed frame yields finite values instead of an error.
    """
    s = skeleton or default_skeleton()
    v = as_tensor(v)
    if v.shape[-2:] != (s.J, 3):
        raise InvalidInputError(f"local pose must have shape (..., {s.J}, 3), got {tuple(v.shape)}")
    art = list(s.articulated)
    if validate:
        norms = torch.linalg.vector_norm(v[..., art, :], dim=-1)
        if bool((torch.abs(norms - 1.0) > UNIT_TOL).any()):
            raise InvalidInputError("local pose vectors must have unit norm")
    batch = v.shape[:-2]
    tmpl = template_positions(s, v)
    pos: list = [tmpl[j].expand(*batch, 3) for j in range(s.J)]
    face = face_vector(tmpl, s)
    face = face.expand(*batch, 3)
    lengths = torch.as_tensor(s.limb_lengths, dtype=v.dtype)
    for j in art:
        par = s.parents[j]
        gp = s.parents[par]
        if gp < 0:
            raise DegenerateFrameError(f"articulated joint {s.joints[j]!r} hangs off the root")
        R = _frame(pos[par] - pos[gp], face, check=validate, eps=eps)
        pos[j] = pos[par] + lengths[j] * (R @ v[..., j, :].unsqueeze(-1)).squeeze(-1)
    return torch.stack(pos, dim=-2)


def _fixed_rows(s: Skeleton, like: torch.Tensor) -> torch.Tensor:
    """Canonical entries stored in a local pose for the rigid joints."""
    t = template_positions(s, like)
    rows = torch.zeros_like(t)
    for j in s.fixed_joints:
        par = s.parents[j]
        rows[j] = torch.tensor([1.0, 0.0, 0.0], dtype=t.dtype) if par < 0 else _normalize(t[j] - t[par])
    return rows


def inverse_kinematics(p, skeleton: Skeleton | None = None, check: bool = True) -> torch.Tensor:
    """Local unit vectors reproducing the limb directions of ``p``.

    Frames are built from the skeleton-length reconstruction rather than
    from ``p`` itself, so that ``forward_kinematics(inverse_kinematics(p))``
    keeps every articulated limb's direction even when ``p``'s bone lengths
    or torso differ from the skeleton's.
    """
    s = skeleton or default_skeleton()
    p = as_tensor(p)
    batch = p.shape[:-2]
    tmpl = template_positions(s, p)
    face = face_vector(tmpl, s).expand(*batch, 3)
    recon: list = [tmpl[j].expand(*batch, 3) for j in range(s.J)]
    rows = _fixed_rows(s, p)
    out: list = [rows[j].expand(*batch, 3) for j in range(s.J)]
    lengths = torch.as_tensor(s.limb_lengths, dtype=p.dtype)
    for j in s.articulated:
        par = s.parents[j]
        R = _frame(recon[par] - recon[s.parents[par]], face, check=check)
        bone = p[..., j, :] - p[..., par, :]
        n = torch.linalg.vector_norm(bone, dim=-1, keepdim=True)
        if check and bool((n < DEGENERATE_EPS).any()):
            raise DegenerateFrameError(f"bone ending at {s.joints[j]!r} has zero length")
        d = bone / n
        out[j] = (R.transpose(-1, -2) @ d.unsqueeze(-1)).squeeze(-1)
        recon[j] = recon[par] + lengths[j] * d
    return torch.stack(out, dim=-2)


def template_local_pose(skeleton: Skeleton | None = None) -> torch.Tensor:
    s = skeleton or default_skeleton()
    return inverse_kinematics(template_positions(s), s)


def align_canonical(w, skeleton: Skeleton | None = None, check: bool = True) -> torch.Tensor:
    """Map a world-space pose into the canonical frame with skeleton bone lengths.

    Translate the pelvis to the origin, scale the pelvis-neck distance to 1,
    rotate the face-vector onto +X and the neck onto the XZ half-plane with
    positive Z, then snap bone lengths through IK followed by FK.
    """
    s = skeleton or default_skeleton()
    w = as_tensor(w)
    p = w - w[..., s.pelvis : s.pelvis + 1, :]
    scale = torch.linalg.vector_norm(p[..., s.neck, :], dim=-1)[..., None, None]
    if check and bool((scale < DEGENERATE_EPS).any()):
        raise DegenerateInputError("pelvis and neck coincide")
    p = p / scale
    e1 = face_vector(p, s, check=check)
    up = p[..., s.neck, :]
    r = up - (up * e1).sum(-1, keepdim=True) * e1
    nr = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if check and bool((nr < DEGENERATE_EPS).any()):
        raise DegenerateInputError("neck lies along the face-vector")
    e3 = r / nr
    e2 = torch.linalg.cross(e3, e1)
    R = torch.stack([e1, e2, e3], dim=-2)
    p = p @ R.transpose(-1, -2)
    return forward_kinematics(inverse_kinematics(p, s, check=check), s, validate=False)


def bone_lengths(p, skeleton: Skeleton | None = None) -> torch.Tensor:
    """Distances child-to-parent for every non-root joint, shape (..., J-1)."""
    s = skeleton or default_skeleton()
    p = as_tensor(p)
    idx = [j for j in range(s.J) if s.parents[j] >= 0]
    par = [s.parents[j] for j in idx]
    return torch.linalg.vector_norm(p[..., idx, :] - p[..., par, :], dim=-1)


def random_local_pose(rng: np.random.Generator, skeleton: Skeleton | None = None, n: int | None = None,
                      spread: float = 1.0) -> torch.Tensor:
    """Perturb the template's local vectors with isotropic Gaussian noise.

    Rows whose frame would become degenerate are resampled. ``spread`` is
    the standard deviation of the noise added to each unit vector.
    """
    s = skeleton or default_skeleton()
    base = template_local_pose(s).numpy()
    shape = (1 if n is None else n,)
    out = np.repeat(base[None], shape[0], axis=0)
    art = list(s.articulated)
    for i in range(shape[0]):
        while True:
            v = out[i].copy()
            noise = rng.normal(scale=spread, size=(len(art), 3))
            d = base[art] + noise
            v[art] = d / np.linalg.norm(d, axis=-1, keepdims=True)
            try:
                forward_kinematics(torch.from_numpy(v), s, validate=True)
            except DegenerateFrameError:
                continue
            if _min_frame_margin(torch.from_numpy(v), s) > 1e-3:
                out[i] = v
                break
    t = torch.from_numpy(out)
    return t[0] if n is None else t


def _min_frame_margin(v: torch.Tensor, s: Skeleton) -> float:
    """Smallest sine between any parent limb and the face-vector."""
    p = forward_kinematics(v, s, validate=False)
    face = torch.tensor([1.0, 0.0, 0.0], dtype=p.dtype)
    worst = 1.0
    for j in s.articulated:
        a = _normalize(_grandparent_limb(p, j, s))
        worst = min(worst, float(torch.linalg.vector_norm(torch.linalg.cross(a, face.expand_as(a)), dim=-1).min()))
    return worst
