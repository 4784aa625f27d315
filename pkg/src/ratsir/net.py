"""Neural pipeline: patch encoder, relation-token MLP, two-hand spatial fusion,
temporal fusion, and the parameter regression head.

Shapes use B for batch, T for frames, a hand axis of size 2 (index 0 = right),
grid H x W token maps with C channels. The desk default is 64x48 crops with
patch 8 (8x6 grid, C=64); everything is configurable and dtype-agnostic
(`model.double()` for float64 gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class Prediction:
    """Per-frame regression output for a hand pair.

    theta_*: (..., 48) axis-angle pose; beta_*: (..., 10) shape; upsilon:
    (..., 3) left-root offset in right-root-centered coordinates (meters);
    cam_*: (..., 3) weak-perspective (scale, t_x, t_y) triples in crop pixels.
    Fields may be numpy arrays or torch tensors with any leading dims.
    """

    theta_R: object
    theta_L: object
    beta_R: object
    beta_L: object
    upsilon: object
    cam_R: object
    cam_L: object

    @classmethod
    def from_stacked(cls, theta, beta, upsilon, cam) -> "Prediction":
        """Build from hand-stacked arrays: theta (..., 2, 48), beta (..., 2, 10),
        cam (..., 2, 3), upsilon (..., 3)."""
        return cls(
            theta_R=theta[..., 0, :], theta_L=theta[..., 1, :],
            beta_R=beta[..., 0, :], beta_L=beta[..., 1, :],
            upsilon=upsilon, cam_R=cam[..., 0, :], cam_L=cam[..., 1, :],
        )


@dataclass
class NetConfig:
    crop_h: int = 64
    crop_w: int = 48
    in_channels: int = 7
    patch: int = 8
    channels: int = 64  # token width C
    enc_depth: int = 2
    enc_heads: int = 4
    relation_hidden: int = 32
    fusion_depth: int = 2
    fusion_heads: int = 4
    feat_dim: int = 128  # per-hand global feature width
    temporal_depth: int = 2
    temporal_heads: int = 4
    head_hidden: int = 128
    mlp_ratio: float = 2.0
    max_seq: int = 16
    temporal_pos_emb: bool = True
    cam_scale_init: float = 180.0  # typical crop-camera scale, seeds the cam head bias

    @property
    def grid_h(self) -> int:
        return self.crop_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.crop_w // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def scaled(self, **kw) -> "NetConfig":
        return replace(self, **kw)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, keep_mask=None):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if keep_mask is not None:
            attn = attn.masked_fill(~keep_mask, float("-inf"))
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context, keep_mask=None):
        B, Nq, D = x.shape
        Nk = context.shape[1]
        h = self.heads
        q = self.to_q(x).reshape(B, Nq, h, D // h).transpose(1, 2)
        k, v = self.to_kv(context).reshape(B, Nk, 2, h, D // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if keep_mask is not None:
            attn = attn.masked_fill(~keep_mask, float("-inf"))
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, Nq, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = max(1, int(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ratio)

    def forward(self, x, keep_mask=None):
        x = x + self.attn(self.norm1(x), keep_mask)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Queries self-attend, cross-attend to memory, then pass through an MLP."""

    def __init__(self, dim: int, heads: int, ratio: float):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_x = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ratio)

    def forward(self, q, mem, keep_mask=None, self_mask=None):
        q = q + self.self_attn(self.norm_q(q), self_mask)
        q = q + self.cross(self.norm_x(q), mem, keep_mask)
        return q + self.mlp(self.norm_m(q))


class PatchEncoder(nn.Module):
    """Toy patch transformer: conv patchify, learned 2D position embedding,
    a short stack of self-attention blocks."""

    def __init__(self, cfg: NetConfig, in_channels: int | None = None):
        super().__init__()
        if cfg.crop_h % cfg.patch or cfg.crop_w % cfg.patch:
            raise ValueError(
                f"crop {cfg.crop_h}x{cfg.crop_w} not divisible by patch {cfg.patch}"
            )
        self.cfg = cfg
        cin = cfg.in_channels if in_channels is None else in_channels
        self.in_channels = cin
        self.patchify = nn.Conv2d(cin, cfg.channels, cfg.patch, stride=cfg.patch)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.channels))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.channels, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth)
        )

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        """(B, C_in, crop_h, crop_w) -> token sequence (B, H*W, C)."""
        if crop.shape[-3] != self.in_channels or crop.shape[-2:] != (self.cfg.crop_h, self.cfg.crop_w):
            raise ValueError(
                f"expected (*, {self.in_channels}, {self.cfg.crop_h}, {self.cfg.crop_w}) crops, "
                f"got {tuple(crop.shape)}"
            )
        x = self.patchify(crop)  # (B, C, H, W)
        x = x.flatten(2).transpose(1, 2) + self.pos_emb
        for blk in self.blocks:
            x = blk(x)
        return x

    def encode(self, crop: torch.Tensor) -> torch.Tensor:
        """Single-crop convenience: (C_in, h, w) -> token map (H, W, C)."""
        tokens = self.forward(crop.unsqueeze(0))[0]
        return tokens.reshape(self.cfg.grid_h, self.cfg.grid_w, self.cfg.channels)


class RelationMLP(nn.Module):
    """Shared per-patch MLP taking the 5 relation channels (own distance map,
    other hand's distance map, overlap) to the token width."""

    def __init__(self, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(5, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, rel: torch.Tensor) -> torch.Tensor:
        """(..., 5) -> (..., out_dim)."""
        return self.fc2(F.relu(self.fc1(rel)))

    def relation_map(self, D_self: torch.Tensor, D_other: torch.Tensor, O_self: torch.Tensor):
        """Spec-level entry: distance maps (H, W, 2) + overlap (H, W, 1) -> (H, W, C)."""
        return self.forward(torch.cat([D_self, D_other, O_self], dim=-1))


def rat_enhance(tokens: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
    """Channelwise concatenation of visual tokens with relation tokens."""
    if tokens.shape[:-1] != relation.shape[:-1]:
        raise ValueError(f"token/relation grids disagree: {tokens.shape} vs {relation.shape}")
    return torch.cat([tokens, relation], dim=-1)


class SpatialFusion(nn.Module):
    """Self-attention over the flattened token blocks of both hands followed by
    a decoder with one learned query per hand.

    `cross_attention=False` restricts every token and query to its own hand's
    block, which makes each hand's global feature depend on that hand alone.
    """

    def __init__(self, dim: int, heads: int, depth: int, out_dim: int, n_segments: int = 2):
        super().__init__()
        self.n_segments = n_segments
        self.segment_emb = nn.Parameter(torch.zeros(n_segments, dim))
        nn.init.normal_(self.segment_emb, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, 2.0) for _ in range(depth))
        self.queries = nn.Parameter(torch.zeros(2, dim))
        nn.init.normal_(self.queries, std=0.02)
        self.decoder = nn.ModuleList(DecoderBlock(dim, heads, 2.0) for _ in range(depth))
        self.out = nn.Linear(dim, out_dim)

    def forward(self, tokens: torch.Tensor, cross_attention: bool = True) -> torch.Tensor:
        """(B, S, N, dim) per-segment token blocks -> (B, 2, out_dim)."""
        B, S, N, D = tokens.shape
        if S != self.n_segments:
            raise ValueError(f"expected {self.n_segments} token blocks, got {S}")
        x = (tokens + self.segment_emb[:, None, :]).reshape(B, S * N, D)

        tok_mask = None
        q_mask = None
        q_self_mask = None
        if not cross_attention and S == 2:
            seg = torch.arange(S * N, device=tokens.device) // N
            tok_mask = (seg[:, None] == seg[None, :])  # block-diagonal
            q_mask = (torch.arange(2, device=tokens.device)[:, None] == seg[None, :])
            q_self_mask = torch.eye(2, device=tokens.device, dtype=torch.bool)
        for blk in self.blocks:
            x = blk(x, tok_mask)
        q = self.queries.to(x.dtype).unsqueeze(0).expand(B, -1, -1)
        for blk in self.decoder:
            q = blk(q, x, q_mask, q_self_mask)
        return self.out(q)

    def fuse_pair(self, tokens_r: torch.Tensor, tokens_l: torch.Tensor,
                  cross_attention: bool = True):
        """Spec-level entry: two (H, W, dim) relation-aware maps -> (G_R, G_L)."""
        stacked = torch.stack([tokens_r.flatten(0, 1), tokens_l.flatten(0, 1)]).unsqueeze(0)
        g = self.forward(stacked, cross_attention)[0]
        return g[0], g[1]


class TemporalFusion(nn.Module):
    """Per-hand self-attention along the frame axis with optional learned
    positional embeddings (disable for permutation-degenerate tests)."""

    def __init__(self, dim: int, heads: int, depth: int, max_len: int, use_pos_emb: bool = True):
        super().__init__()
        self.use_pos_emb = use_pos_emb
        self.pos_emb = nn.Parameter(torch.zeros(max_len, dim))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, 2.0) for _ in range(depth))

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        """(B, T, 2, dim) -> (B, T, 2, dim), per-frame fused features."""
        B, T, H, D = g.shape
        if self.use_pos_emb and T > self.pos_emb.shape[0]:
            raise ValueError(f"sequence length {T} exceeds max_len {self.pos_emb.shape[0]}")
        x = g.permute(0, 2, 1, 3).reshape(B * H, T, D)
        if self.use_pos_emb:
            x = x + self.pos_emb[:T]
        for blk in self.blocks:
            x = blk(x)
        return x.reshape(B, H, T, D).permute(0, 2, 1, 3)


def stack_single_frame(g: torch.Tensor, T: int) -> torch.Tensor:
    """Repeat a single frame's features T times along a new frame axis:
    (B, 2, dim) -> (B, T, 2, dim). Single-frame inputs go through the
    temporal stage as T identical copies."""
    return g.unsqueeze(1).repeat(1, T, 1, 1)


class RegressionHead(nn.Module):
    """MLP heads over per-hand features: pose, shape, camera, and the
    left-root offset (from both hands jointly, or from per-hand root
    regressors when `independent_roots`).

    The camera head's bias starts at a mean camera (inverse-softplus of the
    typical crop scale, crop center translation) so the projection term is
    sanely scaled from step one.
    """

    def __init__(self, feat_dim: int, hidden: int, independent_roots: bool = False,
                 cam_init: tuple[float, float, float] | None = None):
        super().__init__()
        self.independent_roots = independent_roots
        self.trunk = nn.Linear(feat_dim, hidden)
        self.pose = nn.Linear(hidden, 48)
        self.shape = nn.Linear(hidden, 10)
        self.cam = nn.Linear(hidden, 3)
        if cam_init is not None:
            scale0, tx0, ty0 = cam_init
            # softplus^-1; exact for the scales in play
            raw0 = scale0 + math.log(-math.expm1(-scale0)) if scale0 < 30 else scale0
            with torch.no_grad():
                self.cam.bias.copy_(torch.tensor([raw0, tx0, ty0]))
        if independent_roots:
            self.root = nn.Linear(hidden, 3)
        else:
            self.pair_trunk = nn.Linear(2 * feat_dim, hidden)
            self.rel_root = nn.Linear(hidden, 3)

    def forward(self, g: torch.Tensor) -> dict[str, torch.Tensor]:
        """(..., 2, feat) -> dict of stacked outputs; cam scale is softplus'd."""
        h = F.relu(self.trunk(g))
        theta = self.pose(h)
        beta = self.shape(h)
        cam_raw = self.cam(h)
        cam = torch.cat([F.softplus(cam_raw[..., :1]), cam_raw[..., 1:]], dim=-1)
        if self.independent_roots:
            roots = self.root(h)
            upsilon = roots[..., 1, :] - roots[..., 0, :]
        else:
            pair = g.flatten(-2)
            upsilon = self.rel_root(F.relu(self.pair_trunk(pair)))
        return {"theta": theta, "beta": beta, "cam": cam, "upsilon": upsilon}

    def regress(self, g_pair: torch.Tensor) -> Prediction:
        """Spec-level entry: (2, feat) feature pair -> Prediction."""
        out = self.forward(g_pair)
        return Prediction.from_stacked(out["theta"], out["beta"], out["upsilon"], out["cam"])


@dataclass
class VariantSpec:
    holistic: bool = False
    concat_relation: bool = True
    use_rat: bool = True
    cross_attention: bool = True
    temporal: bool = False
    independent_roots: bool = False


VARIANTS: dict[str, VariantSpec] = {
    "baseline": VariantSpec(concat_relation=False, use_rat=False, cross_attention=False,
                            independent_roots=True),
    "cross_h": VariantSpec(holistic=True, concat_relation=False, use_rat=False),
    "cross_s": VariantSpec(),
    "cross_s_no_rat": VariantSpec(use_rat=False),
    "cross_s_seq": VariantSpec(temporal=True),
}


class TwoHandNet(nn.Module):
    """Full pipeline over crop sequences; behavior toggles cover the ablation
    variants (holistic input, relation tokens, cross-hand attention, temporal
    fusion, independent root regression)."""

    def __init__(self, cfg: NetConfig, spec: VariantSpec):
        super().__init__()
        self.cfg = cfg
        self.spec = spec
        enc_in = cfg.in_channels * 2 if spec.holistic else cfg.in_channels
        self.encoder = PatchEncoder(cfg, in_channels=enc_in)
        fusion_dim = cfg.channels * (2 if spec.concat_relation else 1)
        self.fusion_dim = fusion_dim
        if spec.concat_relation:
            self.relation = RelationMLP(cfg.relation_hidden, cfg.channels)
        n_segments = 1 if spec.holistic else 2
        self.fusion = SpatialFusion(fusion_dim, cfg.fusion_heads, cfg.fusion_depth,
                                    cfg.feat_dim, n_segments=n_segments)
        if spec.temporal:
            self.temporal = TemporalFusion(cfg.feat_dim, cfg.temporal_heads,
                                           cfg.temporal_depth, cfg.max_seq,
                                           use_pos_emb=cfg.temporal_pos_emb)
        cam_init = (cfg.cam_scale_init, cfg.crop_w / 2.0, cfg.crop_h / 2.0)
        self.head = RegressionHead(cfg.feat_dim, cfg.head_hidden,
                                   independent_roots=spec.independent_roots,
                                   cam_init=cam_init)

    def forward(self, crops: torch.Tensor, relation: torch.Tensor | None = None,
                force_zero_relation: bool = False) -> dict[str, torch.Tensor]:
        """Run the pipeline over a batch of frame sequences.

        crops: (B, T, 2, C_in, h, w), or (B, T, 2*C_in, h, w) for the holistic
        variant. relation: (B, T, 2, H, W, 5) box-relation channels (ignored
        unless the variant concatenates relation tokens).
        Returns stacked tensors: theta (B, T, 2, 48), beta (B, T, 2, 10),
        cam (B, T, 2, 3), upsilon (B, T, 3).
        """
        if self.spec.holistic:
            B, T = crops.shape[:2]
            tokens = self.encoder(crops.reshape(B * T, *crops.shape[2:]))
            blocks = tokens.unsqueeze(1)  # (B*T, 1, N, C)
        else:
            B, T, H2 = crops.shape[:3]
            if H2 != 2:
                raise ValueError(f"expected a hand axis of size 2, got {H2}")
            tokens = self.encoder(crops.reshape(B * T * 2, *crops.shape[3:]))
            if self.spec.concat_relation:
                if self.spec.use_rat and not force_zero_relation:
                    if relation is None:
                        raise ValueError("this variant needs relation channels")
                    rel = relation.reshape(B * T * 2, self.cfg.n_tokens, 5)
                    rel_tokens = self.relation(rel.to(tokens.dtype))
                else:
                    rel_tokens = torch.zeros_like(tokens)
                tokens = rat_enhance(tokens, rel_tokens)
            blocks = tokens.reshape(B * T, 2, self.cfg.n_tokens, self.fusion_dim)

        g = self.fusion(blocks, cross_attention=self.spec.cross_attention)  # (B*T, 2, feat)
        if self.spec.temporal:
            g = g.reshape(B, T, 2, -1)
            g = self.temporal(g)
            g = g.reshape(B * T, 2, -1)
        out = self.head(g)
        return {
            "theta": out["theta"].reshape(B, T, 2, 48),
            "beta": out["beta"].reshape(B, T, 2, 10),
            "cam": out["cam"].reshape(B, T, 2, 3),
            "upsilon": out["upsilon"].reshape(B, T, 3),
        }


def build_model(variant: str, cfg: NetConfig, seed: int = 0) -> TwoHandNet:
    """Construct a variant model with seeded initialization."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    torch.manual_seed(seed)
    return TwoHandNet(cfg, VARIANTS[variant])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: nn.Module, prefix, meta: dict | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    """Checkpoint as manifest + f32 blob; optimizer moments ride along under
    an 'opt.' prefix."""
    from . import blobio

    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for gi, group in enumerate(optimizer.state_dict()["state"].items()):
            pid, state = group
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    arrays[f"opt.{pid}.{key}"] = val.detach().cpu().numpy()
                else:
                    arrays[f"opt.{pid}.{key}"] = np.asarray([val], dtype=np.float32)
    blobio.write_arrays(prefix, arrays, meta=meta or {})


def load_checkpoint(model: nn.Module, prefix,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore weights (and optimizer moments if given); returns manifest meta."""
    from . import blobio

    arrays, meta = blobio.read_arrays(prefix)
    state = {}
    for k, v in arrays.items():
        if not k.startswith("opt."):
            state[k] = torch.as_tensor(v)
    ref = model.state_dict()
    state = {k: v.to(ref[k].dtype) for k, v in state.items()}
    model.load_state_dict(state)
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for k, v in arrays.items():
            if not k.startswith("opt."):
                continue
            _, pid, key = k.split(".", 2)
            entry = opt_state["state"].setdefault(int(pid), {})
            if key == "step":
                entry[key] = torch.as_tensor(float(np.asarray(v).reshape(-1)[0]))
            else:
                entry[key] = torch.as_tensor(v)
        optimizer.load_state_dict(opt_state)
    return meta
