"""Procedural parametric hand model: template, blendshapes, and skinned forward pass.

A seeded stand-in for a licensed hand asset with the same interface: 48
axis-angle pose values over 16 posed joints (wrist + 3 per finger), 10 shape
coefficients, 778 mesh vertices by default, and 21 regressed joints
(wrist, 4 per finger, 5 tips). All geometry is in meters.

Joint ordering: 0 = wrist; 1+3f+j = articulation j of finger f (knuckle,
mid, distal) for f in thumb..little; 16+f = fingertip of finger f. Only
joints 0..15 carry rotations; tips are regressed keypoints.

The left hand is the x-negation of the right. Mirroring an axis-angle
across the x-plane negates its y and z components, and the skinning math
is exactly equivariant under that conjugation, so left/right consistency
holds to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import blobio

N_JOINTS = 21
N_POSED = 16
N_SHAPE = 10
N_FINGERS = 5

# Parents of the 16 posed joints (wrist root, then 3-joint chains per finger).
POSED_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)

# Parents over all 21 joints (tips hang off the distal articulations); this
# edge set defines the bones used for skeleton scaling in the metrics.
JOINT_PARENTS = POSED_PARENTS + (3, 6, 9, 12, 15)

# Joints drawn into each crop channel: wrist alone, then one group per finger.
FINGER_JOINT_GROUPS = tuple(
    (1 + 3 * f, 2 + 3 * f, 3 + 3 * f, 16 + f) for f in range(N_FINGERS)
)


@dataclass(frozen=True)
class HandParams:
    """Pose (48 axis-angle values, radians) + shape (10 coefficients) + side."""

    theta: np.ndarray
    beta: np.ndarray
    side: str = "right"

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if theta.shape != (48,):
            raise ValueError(f"theta must have shape (48,), got {theta.shape}")
        if beta.shape != (10,):
            raise ValueError(f"beta must have shape (10,), got {beta.shape}")
        if not np.all(np.isfinite(theta)) or not np.all(np.isfinite(beta)):
            raise ValueError("hand parameters must be finite")
        if np.any(np.abs(beta) > 5.0):
            raise ValueError("shape coefficients exceed the sampling bound |beta| <= 5")
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class HandTemplate:
    """Rest geometry, blendshapes, kinematic tree, skinning weights, joint regressor."""

    vertices0: np.ndarray  # (N_v, 3)
    joints0: np.ndarray  # (21, 3)
    parent: np.ndarray  # (16,) int, parent[0] == -1
    skin_weights: np.ndarray  # (N_v, 16), rows sum to 1
    shape_dirs: np.ndarray  # (N_v, 3, 10)
    joint_regressor: np.ndarray  # (21, N_v), rows sum to 1

    @property
    def n_vertices(self) -> int:
        return self.vertices0.shape[0]


@dataclass(frozen=True)
class HandOutput:
    vertices: np.ndarray  # (N_v, 3)
    joints: np.ndarray  # (21, 3), joints[0] is the wrist/root


def mirror_pose(theta: np.ndarray | torch.Tensor):
    """Axis-angle pose reflected across the x-plane: y and z components negate."""
    flat = theta.reshape(*theta.shape[:-1], 16, 3)
    if isinstance(flat, torch.Tensor):
        sign = torch.tensor([1.0, -1.0, -1.0], dtype=flat.dtype, device=flat.device)
    else:
        sign = np.array([1.0, -1.0, -1.0])
    return (flat * sign).reshape(theta.shape)


def _exact_unit_rows(w: np.ndarray) -> np.ndarray:
    """Normalize rows, then nudge the largest entry so each row sums to 1.0 exactly.

    Exact sums make the rest pose reproduce the template bitwise (blended
    identity transforms stay the identity).
    """
    w = w / w.sum(axis=1, keepdims=True)
    for row in w:
        imax = int(np.argmax(row))
        for _ in range(4):
            err = 1.0 - row.sum()
            if err == 0.0:
                break
            row[imax] += err
    return w


def _finger_frames(rng: np.random.Generator):
    """Per-finger direction (unit, in the palm plane) and segment lengths."""
    base_angles = np.array([1.05, 0.30, 0.02, -0.20, -0.44])
    meta = np.array([0.040, 0.092, 0.100, 0.094, 0.082])
    l1 = np.array([0.046, 0.044, 0.050, 0.046, 0.036])
    l2 = np.array([0.032, 0.027, 0.031, 0.029, 0.022])
    l3 = np.array([0.030, 0.023, 0.025, 0.023, 0.019])
    angles = base_angles + rng.uniform(-0.05, 0.05, N_FINGERS)
    jitter = 1.0 + rng.uniform(-0.07, 0.07, (4, N_FINGERS))
    dirs = np.stack([np.sin(angles), np.cos(angles), np.zeros(N_FINGERS)], axis=1)
    lengths = np.stack([meta, l1, l2, l3]) * jitter
    return dirs, lengths


def build_template(seed: int, n_vertices: int = 778) -> HandTemplate:
    """Deterministic right-hand template with `n_vertices` mesh vertices.

    Every joint gets a small ring of vertices whose centroid is the joint,
    so the joint regressor reproduces the rest joints by construction. The
    remaining vertices are scattered around the bone segments.
    """
    if n_vertices < N_JOINTS:
        raise ValueError(f"n_vertices must be >= {N_JOINTS}, got {n_vertices}")
    rng = np.random.default_rng(seed)
    dirs, lengths = _finger_frames(rng)

    # Joint centers: wrist at origin, chains laid along each finger direction
    # with a slight downward arch.
    centers = np.zeros((N_JOINTS, 3))
    arch = np.array([0.0, -0.004, -0.008, -0.012])
    for f in range(N_FINGERS):
        pos = np.zeros(3)
        for seg in range(4):
            pos = pos + dirs[f] * lengths[seg, f]
            j = 1 + 3 * f + seg if seg < 3 else 16 + f
            centers[j] = pos + np.array([0.0, 0.0, arch[seg]])

    thickness = np.full(N_JOINTS, 0.009)
    thickness[0] = 0.020
    thickness[[1, 4, 7, 10, 13]] = 0.012
    thickness[16:] = 0.006

    ring_size = max(1, min(6, n_vertices // N_JOINTS))
    n_ring = ring_size * N_JOINTS
    verts = np.zeros((n_vertices, 3))
    for j in range(N_JOINTS):
        radius = 0.0 if ring_size == 1 else thickness[j]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ang = phase + 2.0 * np.pi * np.arange(ring_size) / ring_size
        # Ring in the x-z plane; centroid is the joint center for any K >= 2.
        ring = centers[j] + radius * np.stack(
            [np.cos(ang), np.zeros(ring_size), np.sin(ang)], axis=1
        )
        verts[j * ring_size : (j + 1) * ring_size] = ring

    # Scatter the rest along bones, weighted by bone length.
    edges = [(JOINT_PARENTS[j], j) for j in range(1, N_JOINTS)]
    elens = np.array([np.linalg.norm(centers[b] - centers[a]) for a, b in edges])
    probs = elens / elens.sum()
    n_free = n_vertices - n_ring
    if n_free > 0:
        picks = rng.choice(len(edges), size=n_free, p=probs)
        ts = rng.uniform(0.0, 1.0, n_free)
        offs = rng.normal(0.0, 1.0, (n_free, 3))
        offs /= np.linalg.norm(offs, axis=1, keepdims=True)
        for idx in range(n_free):
            a, b = edges[picks[idx]]
            r = 0.8 * min(thickness[a], thickness[b]) * (0.4 + 0.6 * rng.uniform())
            verts[n_ring + idx] = centers[a] + ts[idx] * (centers[b] - centers[a]) + r * offs[idx]

    # Regressor: uniform weight over each joint's ring, exact row sums.
    regressor = np.zeros((N_JOINTS, n_vertices))
    for j in range(N_JOINTS):
        regressor[j, j * ring_size : (j + 1) * ring_size] = 1.0 / ring_size
    regressor = _exact_unit_rows(regressor)
    joints0 = regressor @ verts

    # Skinning: gaussian falloff on distance to each posed joint's bone
    # segment, top-4 support per vertex.
    child_of = {p: c for c, p in enumerate(POSED_PARENTS) if p >= 0}
    seg_b = np.zeros((N_POSED, 3))
    seg_e = np.zeros((N_POSED, 3))
    for j in range(N_POSED):
        seg_b[j] = centers[j]
        if j == 0:
            seg_e[j] = centers[j]
        elif j in (3, 6, 9, 12, 15):
            seg_e[j] = centers[16 + (j - 3) // 3]  # distal bone runs to the tip
        else:
            seg_e[j] = centers[child_of[j]]
    d = np.zeros((n_vertices, N_POSED))
    for j in range(N_POSED):
        ab = seg_e[j] - seg_b[j]
        denom = float(ab @ ab)
        if denom == 0.0:
            closest = np.broadcast_to(seg_b[j], (n_vertices, 3))
        else:
            t = np.clip(((verts - seg_b[j]) @ ab) / denom, 0.0, 1.0)
            closest = seg_b[j] + t[:, None] * ab
        d[:, j] = np.linalg.norm(verts - closest, axis=1)
    w = np.exp(-(d**2) / (2 * 0.015**2))
    keep = np.argsort(w, axis=1)[:, -4:]
    mask = np.zeros_like(w)
    np.put_along_axis(mask, keep, 1.0, axis=1)
    w = np.maximum(w * mask, 1e-12 * mask)
    skin_weights = _exact_unit_rows(w)

    # Blendshapes: overall scale, finger lengthening, then seeded smooth fields.
    shape_dirs = np.zeros((n_vertices, 3, N_SHAPE))
    shape_dirs[:, :, 0] = 0.05 * verts
    shape_dirs[:, 1, 1] = 0.05 * verts[:, 1]
    for k in range(2, N_SHAPE):
        freq = rng.uniform(5.0, 15.0, 3)
        phase = rng.uniform(0.0, 2.0 * np.pi, 3)
        axis = rng.normal(0.0, 1.0, 3)
        axis /= np.linalg.norm(axis)
        field = np.sin(verts @ freq + phase[0])
        shape_dirs[:, :, k] = 0.004 * field[:, None] * axis

    return HandTemplate(
        vertices0=verts,
        joints0=joints0,
        parent=np.array(POSED_PARENTS, dtype=np.int64),
        skin_weights=skin_weights,
        shape_dirs=shape_dirs,
        joint_regressor=regressor,
    )


def rodrigues(r: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses R = I + a*K + b*K^2 with a Taylor fallback below 1e-8 so the map
    and its gradient stay well-behaved at zero.
    """
    sq = (r * r).sum(-1, keepdim=True)
    angle = torch.sqrt(sq.clamp_min(1e-32))
    small = sq < 1e-16
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / sq.clamp_min(1e-32))
    zeros = torch.zeros_like(r[..., 0])
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]
    K = torch.stack(
        [zeros, -rz, ry, rz, zeros, -rx, -ry, rx, zeros], dim=-1
    ).reshape(*r.shape[:-1], 3, 3)
    K2 = K @ K
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * K2


class HandModel:
    """Differentiable batched forward pass over a fixed template.

    Tensors for the right side are the template as-is; the left side is its
    exact x-negation. Instances are immutable and safe to share across threads.
    """

    def __init__(self, template: HandTemplate, dtype: torch.dtype = torch.float64):
        self.template = template
        self.dtype = dtype
        as_t = lambda a: torch.as_tensor(a, dtype=dtype)
        flip = torch.tensor([-1.0, 1.0, 1.0], dtype=dtype)
        self._side = {}
        for side in ("right", "left"):
            sgn = 1.0 if side == "right" else flip
            self._side[side] = {
                "vertices0": as_t(template.vertices0) * sgn,
                "shape_dirs": as_t(template.shape_dirs) * (sgn.view(1, 3, 1) if side == "left" else 1.0),
            }
        self._regressor = as_t(template.joint_regressor)
        self._weights = as_t(template.skin_weights)
        self._parents = list(template.parent)

    def forward(self, theta: torch.Tensor, beta: torch.Tensor, side: str = "right"):
        """theta (..., 48), beta (..., 10) -> (vertices (..., N_v, 3), joints (..., 21, 3))."""
        if side not in self._side:
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        bank = self._side[side]
        v_shaped = bank["vertices0"] + torch.einsum("vck,...k->...vc", bank["shape_dirs"], beta)
        j_shaped = torch.einsum("jv,...vc->...jc", self._regressor, v_shaped)
        rots = rodrigues(theta.reshape(*theta.shape[:-1], N_POSED, 3))

        # World rotations and joint displacements relative to the rest pose.
        # Blending displacements (rather than absolute affines) makes the
        # rest pose reproduce the template bitwise: every term is an exact
        # zero when all rotations are the identity.
        rest = j_shaped[..., :N_POSED, :]
        eye = torch.eye(3, dtype=theta.dtype, device=rots.device)
        R_w = [rots[..., 0, :, :]]
        q_w = [torch.zeros_like(rest[..., 0, :])]
        for j in range(1, N_POSED):
            par = self._parents[j]
            R_w.append(R_w[par] @ rots[..., j, :, :])
            off = rest[..., j, :] - rest[..., par, :]
            q_w.append(((R_w[par] - eye) @ off.unsqueeze(-1)).squeeze(-1) + q_w[par])
        Rw_rel = torch.stack(R_w, dim=-3) - eye  # (..., 16, 3, 3)
        qw = torch.stack(q_w, dim=-2)  # (..., 16, 3)

        # Vertex displacement from joint j: (R_j - I) (v - rest_j) + q_j.
        trans = qw - (Rw_rel @ rest.unsqueeze(-1)).squeeze(-1)
        rot_blend = torch.einsum("vj,...jrc->...vrc", self._weights, Rw_rel)
        t_blend = torch.einsum("vj,...jc->...vc", self._weights, trans)
        verts = v_shaped + (rot_blend @ v_shaped.unsqueeze(-1)).squeeze(-1) + t_blend
        joints = torch.einsum("jv,...vc->...jc", self._regressor, verts)
        return verts, joints


def forward(template: HandTemplate, params: HandParams) -> HandOutput:
    """Pose the template with `params`; returns float64 numpy geometry."""
    model = HandModel(template, dtype=torch.float64)
    theta = torch.from_numpy(np.asarray(params.theta, dtype=np.float64))
    beta = torch.from_numpy(np.asarray(params.beta, dtype=np.float64))
    with torch.no_grad():
        verts, joints = model.forward(theta, beta, side=params.side)
    return HandOutput(vertices=verts.numpy(), joints=joints.numpy())


# Template fields in on-disk order; everything is written as float32.
_TEMPLATE_FIELDS = ("vertices0", "joints0", "parent", "skin_weights", "shape_dirs", "joint_regressor")


def save_template(template: HandTemplate, prefix: Path) -> None:
    arrays = {}
    for name in _TEMPLATE_FIELDS:
        arr = getattr(template, name)
        arrays[name] = arr.astype(np.float32)
    blobio.write_arrays(Path(prefix), arrays, meta={"kind": "hand-template", "n_vertices": template.n_vertices})


def load_template(prefix: Path) -> HandTemplate:
    arrays, _ = blobio.read_arrays(Path(prefix))
    missing = [f for f in _TEMPLATE_FIELDS if f not in arrays]
    if missing:
        raise blobio.BlobFormatError(f"template file missing fields: {missing}")
    return HandTemplate(
        vertices0=arrays["vertices0"].astype(np.float64),
        joints0=arrays["joints0"].astype(np.float64),
        parent=arrays["parent"].astype(np.int64),
        skin_weights=arrays["skin_weights"].astype(np.float64),
        shape_dirs=arrays["shape_dirs"].astype(np.float64),
        joint_regressor=arrays["joint_regressor"].astype(np.float64),
    )
