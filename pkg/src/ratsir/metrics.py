"""Evaluation metrics: aligned joint/vertex errors, relative-root error,
acceleration error, and PCK area-under-curve.

All distances are reported in millimeters (inputs are meters); acceleration
error is mm/s^2. Functions are pure numpy and operate on single hands or
sequences; batch aggregation lives in the trainer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .handkin import JOINT_PARENTS

# Bone edges of the 21-joint skeleton (child, parent), used for skeleton scaling.
BONE_EDGES = tuple((j, JOINT_PARENTS[j]) for j in range(1, len(JOINT_PARENTS)))


@dataclass
class MetricReport:
    mpjpe_mm: float
    mpvpe_mm: float
    mrrpe_mm: float
    accel_e_mm_s2: float
    auc: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _mean_bone_length(joints: np.ndarray) -> float:
    segs = np.array([joints[c] - joints[p] for c, p in BONE_EDGES])
    return float(np.linalg.norm(segs, axis=1).mean())


def aligned_joint_errors(J: np.ndarray, J_gt: np.ndarray) -> np.ndarray:
    """Per-joint errors (mm) after root alignment and skeleton scaling.

    Both skeletons are re-rooted at joint 0, then the prediction is scaled
    so its mean bone length matches ground truth. A degenerate prediction
    with zero total bone length skips the scaling with a warning.
    """
    J = np.asarray(J, dtype=np.float64)
    J_gt = np.asarray(J_gt, dtype=np.float64)
    Jc = J - J[0]
    Gc = J_gt - J_gt[0]
    pred_len = _mean_bone_length(Jc)
    if pred_len == 0.0:
        warnings.warn("zero predicted bone length; skeleton scaling skipped")
        lam = 1.0
    else:
        lam = _mean_bone_length(Gc) / pred_len
    return np.linalg.norm(lam * Jc - Gc, axis=1) * 1000.0


def mpjpe(J: np.ndarray, J_gt: np.ndarray) -> float:
    """Mean per-joint position error (mm), root-aligned and skeleton-scaled."""
    return float(aligned_joint_errors(J, J_gt).mean())


def mpvpe(V: np.ndarray, V_gt: np.ndarray, root: np.ndarray | None = None,
          root_gt: np.ndarray | None = None) -> float:
    """Mean per-vertex position error (mm) after root alignment (no scaling).

    Roots default to vertex 0 of each mesh; the evaluator passes the root
    joint of the matching skeleton instead.
    """
    V = np.asarray(V, dtype=np.float64)
    V_gt = np.asarray(V_gt, dtype=np.float64)
    r = V[0] if root is None else np.asarray(root, dtype=np.float64)
    rg = V_gt[0] if root_gt is None else np.asarray(root_gt, dtype=np.float64)
    return float(np.linalg.norm((V - r) - (V_gt - rg), axis=1).mean() * 1000.0)


def mrrpe(upsilon: np.ndarray, upsilon_gt: np.ndarray) -> float:
    """Relative-root position error (mm): distance between the two offsets."""
    d = np.asarray(upsilon, dtype=np.float64) - np.asarray(upsilon_gt, dtype=np.float64)
    return float(np.linalg.norm(d) * 1000.0)


def accel_e(J_seq: np.ndarray, J_gt_seq: np.ndarray, fps: float) -> float:
    """Acceleration error (mm/s^2) between predicted and GT joint sequences.

    Accelerations are second central differences scaled by fps^2; the mean
    runs over interior frames and joints.
    """
    J_seq = np.asarray(J_seq, dtype=np.float64)
    J_gt_seq = np.asarray(J_gt_seq, dtype=np.float64)
    if J_seq.shape[0] < 3:
        raise ValueError(f"need at least 3 frames for accelerations, got {J_seq.shape[0]}")
    if J_seq.shape != J_gt_seq.shape:
        raise ValueError(f"shape mismatch: {J_seq.shape} vs {J_gt_seq.shape}")

    def acc(x):
        return (x[2:] - 2.0 * x[1:-1] + x[:-2]) * fps * fps

    return float(np.linalg.norm(acc(J_seq) - acc(J_gt_seq), axis=-1).mean() * 1000.0)


def auc(errors, max_threshold: float = 50.0, n_thresholds: int = 100) -> float:
    """Normalized area under the PCK curve for thresholds in [0, max_threshold] mm.

    PCK(t) is the fraction of errors <= t; integration is trapezoidal over
    n_thresholds uniform points.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("need at least one error value")
    thresholds = np.linspace(0.0, max_threshold, n_thresholds)
    pck = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return float(np.trapezoid(pck, thresholds) / max_threshold)
