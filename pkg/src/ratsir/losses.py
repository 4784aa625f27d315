"""Training losses: residual-weighted MSE, parameter/3D/2D terms, and inter-hand terms.

All functions are torch-based and differentiable; they accept arbitrary
leading batch dimensions and reduce per sample, returning a tensor of the
leading shape (a 0-dim tensor for unbatched inputs).

Coordinate convention for the inter-hand terms: joints and vertices of both
hands are expressed with the right palm joint at the origin (the dataset
stores ground truth that way, and predicted geometry is re-expressed the
same way before the loss), so pair vectors are translation-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch

from .geom import WeakPerspectiveCamera

if TYPE_CHECKING:
    from .net import Prediction

_TINY = 1e-30


@dataclass
class LossWeights:
    """Per-term weights plus the close-vertex gate threshold alpha."""

    w_mano: float = 1.0
    w_3d: float = 1.0
    w_2d: float = 1.0
    w_jrel: float = 1.0
    w_close: float = 1.0
    alpha: float = 0.005
    n_j: int = 21
    n_v: int = 778

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        for name in ("w_mano", "w_3d", "w_2d", "w_jrel", "w_close"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def maxmse(pred, gt) -> torch.Tensor:
    """Residual-weighted squared error: sum ||d_i||^4 / sum ||d_i||^2 over the
    point set (last two dims). Upweights the worst points; equals ||d||^2 when
    all residual norms are equal, and 0 (by continuity) at zero residual.
    """
    pred, gt = _t(pred), _t(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.ndim < 2 or pred.shape[-2] < 1:
        raise ValueError("expected at least one point of at least one coordinate")
    delta = pred - gt
    s2 = (delta * delta).sum(-1)
    num = (s2 * s2).sum(-1)
    den = s2.sum(-1)
    return torch.where(den > 0, num / den.clamp_min(_TINY), torch.zeros_like(num))


def project_points(cam, points: torch.Tensor) -> torch.Tensor:
    """Weak-perspective projection of (..., N, 3) points.

    `cam` is either a WeakPerspectiveCamera or a (..., 3) tensor of
    (scale, t_x, t_y) rows broadcastable against the points' leading dims.
    """
    points = _t(points)
    if isinstance(cam, WeakPerspectiveCamera):
        cam = torch.tensor([cam.scale, cam.t_x, cam.t_y], dtype=points.dtype)
    cam = _t(cam)
    scale = cam[..., 0:1].unsqueeze(-2)
    trans = cam[..., 1:3].unsqueeze(-2)
    return scale * points[..., :2] + trans


def l_mano(pred: "Prediction", gt: "Prediction") -> torch.Tensor:
    """Squared parameter error summed over pose and shape of both hands."""
    out = 0.0
    for name in ("theta_R", "theta_L", "beta_R", "beta_L"):
        d = _t(getattr(pred, name)) - _t(getattr(gt, name))
        out = out + (d * d).sum(-1)
    return out


def l_3d(V, J, V_gt, J_gt) -> torch.Tensor:
    """Single-hand 3D supervision: maxmse over vertices plus maxmse over joints."""
    return maxmse(_t(V_gt), _t(V)) + maxmse(_t(J_gt), _t(J))


def l_2d(cam, J, j_gt) -> torch.Tensor:
    """Reprojection loss: maxmse between projected joints and 2D targets."""
    return maxmse(project_points(cam, _t(J)), _t(j_gt))


def _pair_vectors(right: torch.Tensor, left: torch.Tensor) -> torch.Tensor:
    """(..., Ni, 3), (..., Nk, 3) -> (..., Ni, Nk, 3): vector from right point i
    to left point k."""
    return left.unsqueeze(-3) - right.unsqueeze(-2)


def l_jrel(J_R, J_L, J_R_gt, J_L_gt) -> torch.Tensor:
    """Joint-relation loss: squared error of all right-to-left joint pair
    vectors (21 x 21), right palm at the origin by convention."""
    phi_pred = _pair_vectors(_t(J_R), _t(J_L))
    phi_gt = _pair_vectors(_t(J_R_gt), _t(J_L_gt))
    d = phi_pred - phi_gt
    return (d * d).sum((-3, -2, -1))


def l_close(V_R, V_L, V_R_gt, V_L_gt, alpha: float, gate_squared: bool = True,
            idx_R=None, idx_L=None) -> torch.Tensor:
    """Close-vertex loss: squared pair-vector error over vertex pairs whose
    ground-truth pair distance is within the gate.

    The gate compares the squared GT distance to alpha when gate_squared is
    True (the formula as written), else the plain distance. idx_R/idx_L
    restrict both hands to a vertex subsample for train-time tractability.
    """
    V_R, V_L, V_R_gt, V_L_gt = _t(V_R), _t(V_L), _t(V_R_gt), _t(V_L_gt)
    if idx_R is not None:
        V_R = V_R[..., idx_R, :]
        V_R_gt = V_R_gt[..., idx_R, :]
    if idx_L is not None:
        V_L = V_L[..., idx_L, :]
        V_L_gt = V_L_gt[..., idx_L, :]
    phi_gt = _pair_vectors(V_R_gt, V_L_gt)
    gt_sq = (phi_gt * phi_gt).sum(-1)
    gate = (gt_sq <= alpha) if gate_squared else (gt_sq <= alpha * alpha)
    d = _pair_vectors(V_R, V_L) - phi_gt
    return ((d * d).sum(-1) * gate).sum((-2, -1))


@dataclass
class FrameBundle:
    """Everything the total loss needs for a batch of frame pairs.

    Geometry is in the right-root-centered frame (index 0 of the hand axis
    is the right hand). `j2d` holds crop-space 2D joint targets and is only
    required on the ground-truth side.
    """

    theta: torch.Tensor  # (..., 2, 48)
    beta: torch.Tensor  # (..., 2, 10)
    upsilon: torch.Tensor  # (..., 3)
    cam: torch.Tensor  # (..., 2, 3) rows of (scale, t_x, t_y)
    joints: torch.Tensor  # (..., 2, 21, 3)
    verts: torch.Tensor  # (..., 2, N_v, 3)
    j2d: torch.Tensor | None = None  # (..., 2, 21, 2)


@dataclass
class TotalLossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    gate_squared: bool = True
    close_idx_R: torch.Tensor | None = None
    close_idx_L: torch.Tensor | None = None


def total_loss(pred: FrameBundle, gt: FrameBundle, weights: LossWeights,
               cfg: TotalLossConfig | None = None):
    """Weighted sum of all terms, averaged over leading batch dims.

    Returns (total, breakdown) where breakdown maps term name to its
    unweighted batch-mean value (0-dim tensors).
    """
    cfg = cfg or TotalLossConfig(weights=weights)
    terms: dict[str, torch.Tensor] = {}

    d_th = pred.theta - gt.theta
    d_be = pred.beta - gt.beta
    terms["mano"] = ((d_th * d_th).sum((-2, -1)) + (d_be * d_be).sum((-2, -1))).mean()

    root = pred.joints[..., :, 0:1, :]
    root_gt = gt.joints[..., :, 0:1, :]
    t3d = l_3d(pred.verts - root, pred.joints - root, gt.verts - root_gt, gt.joints - root_gt)
    terms["3d"] = t3d.sum(-1).mean()

    if gt.j2d is None:
        raise ValueError("ground-truth bundle needs j2d targets for the 2D term")
    t2d = l_2d(pred.cam, pred.joints, gt.j2d)
    terms["2d"] = t2d.sum(-1).mean()

    terms["jrel"] = l_jrel(
        pred.joints[..., 0, :, :], pred.joints[..., 1, :, :],
        gt.joints[..., 0, :, :], gt.joints[..., 1, :, :],
    ).mean()

    terms["close"] = l_close(
        pred.verts[..., 0, :, :], pred.verts[..., 1, :, :],
        gt.verts[..., 0, :, :], gt.verts[..., 1, :, :],
        weights.alpha, gate_squared=cfg.gate_squared,
        idx_R=cfg.close_idx_R, idx_L=cfg.close_idx_L,
    ).mean()

    total = (
        weights.w_mano * terms["mano"]
        + weights.w_3d * terms["3d"]
        + weights.w_2d * terms["2d"]
        + weights.w_jrel * terms["jrel"]
        + weights.w_close * terms["close"]
    )
    return total, terms
