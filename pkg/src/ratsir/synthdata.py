"""Synthetic two-hand sequence generator and dataset serialization.

Sequences are T frames sampled from band-limited sinusoidal parameter
trajectories at a configurable source-frame gap. Each frame stores, per hand,
a rendered crop (joint splats grouped by finger + a normalized depth
channel), a bounding box in image pixels, ground-truth model parameters,
3D joints/vertices, and crop-space 2D joints.

Frame geometry convention: everything 3D is expressed with the right hand's
root at the origin, so the stored left root equals the relative-root offset
exactly. Cameras are per-hand crop-space weak-perspective triples; applying
a stored camera to the stored joints reproduces the stored 2D joints.

All stored quantities are quantized to float32 *before* dependent values
are computed, which makes regeneration from stored inputs bitwise-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import blobio
from .geom import BoundingBox, WeakPerspectiveCamera
from .handkin import FINGER_JOINT_GROUPS, HandModel, HandOutput, HandTemplate, build_template
from .net import Prediction


class DataIntegrityError(RuntimeError):
    """Dataset manifest and blob disagree, or stored GT fails self-consistency."""


@dataclass
class RenderConfig:
    crop_h: int = 64
    crop_w: int = 48
    splat_sigma: float = 1.5
    noise_std: float = 0.04
    margin: float = 1.25
    depth_span: float = 0.15  # meters mapped onto the depth channel
    box_center_jitter: float = 2.0  # pixels
    box_scale_jitter: float = 0.03

    @property
    def channels(self) -> int:
        return 7  # wrist + 5 finger groups + depth


@dataclass
class DatasetConfig:
    count: int = 16
    T: int = 9
    gap: int = 5
    fps_source: float = 30.0
    seed: int = 0
    interaction: tuple[float, float] = (0.7, 1.0)
    template_seed: int = 0
    n_vertices: int = 778
    cam_scale: tuple[float, float] = (220.0, 260.0)  # pixels per meter, uniform range
    image_size: tuple[int, int] = (768, 576)  # (width, height), reference frame for boxes
    far_distance: float = 1.6  # root separation at interaction_level = 0 (meters)
    near_distance: float = 0.06
    render: RenderConfig = field(default_factory=RenderConfig)

    @property
    def fps(self) -> float:
        return self.fps_source / self.gap

    @property
    def source_span(self) -> int:
        return (self.T - 1) * self.gap + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "render" in d and isinstance(d["render"], dict):
            d["render"] = RenderConfig(**d["render"])
        for key in ("interaction", "cam_scale", "image_size"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class MotionSample:
    """Smooth parameter trajectories for one sequence (float64)."""

    theta: np.ndarray  # (T, 2, 48), hand axis 0 = right
    beta: np.ndarray  # (2, 10)
    root: np.ndarray  # (T, 2, 3) world root translations, meters
    interaction_level: float


def _band_limited(rng: np.random.Generator, times: np.ndarray, base: float,
                  amp_total: float, rate_cap: float) -> np.ndarray:
    """Sum of up to 3 sinusoids around `base`, with sum(A_m * w_m) <= rate_cap
    so consecutive sampled frames stay close."""
    n = int(rng.integers(1, 4))
    amps = rng.uniform(0.2, 1.0, n)
    amps *= amp_total / amps.sum()
    freqs = rng.uniform(0.2, 1.2, n)
    rate = float((amps * freqs).sum())
    if rate > rate_cap:
        amps *= rate_cap / rate
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    out = np.full_like(times, base)
    for a, w, p in zip(amps, freqs, phases):
        out = out + a * np.sin(w * times + p)
    return out


def sample_motion(seed, T: int, interaction_level: float, gap: int = 5,
                  fps_source: float = 30.0, far_distance: float = 1.6,
                  near_distance: float = 0.06) -> MotionSample:
    """Band-limited two-hand trajectories; interaction_level in [0, 1] sets the
    mean root separation (1 = overlapping boxes, 0 = far apart).
    Deterministic per seed."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 <= interaction_level <= 1.0:
        raise ValueError(f"interaction_level must be in [0, 1], got {interaction_level}")
    rng = np.random.default_rng(seed)
    times = np.arange(T, dtype=np.float64) * (gap / fps_source)

    theta = np.zeros((T, 2, 48))
    beta = rng.uniform(-2.0, 2.0, (2, 10))
    for h in range(2):
        # Wrist orientation wobble.
        for c in range(3):
            theta[:, h, c] = _band_limited(rng, times, rng.uniform(-0.3, 0.3), 0.25, 1.0)
        # Finger articulations: strong curl on the local x axis, small off-axis.
        for j in range(15):
            for c in range(3):
                d = 3 + 3 * j + c
                if c == 0:
                    theta[:, h, d] = _band_limited(rng, times, rng.uniform(0.05, 0.7), 0.35, 1.0)
                else:
                    theta[:, h, d] = _band_limited(rng, times, rng.uniform(-0.1, 0.1), 0.12, 1.0)

    root = np.zeros((T, 2, 3))
    for c in range(3):
        root[:, 0, c] = _band_limited(rng, times, rng.uniform(-0.05, 0.05), 0.03, 0.6)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(heading), np.sin(heading), 0.0])
    perp = np.array([-direction[1], direction[0], 0.0])
    d_mean = far_distance + (near_distance - far_distance) * interaction_level
    dist = _band_limited(rng, times, d_mean, 0.04 + 0.05 * d_mean * interaction_level, 0.3)
    swing = _band_limited(rng, times, 0.0, 0.03, 0.4)
    lift = _band_limited(rng, times, 0.0, 0.015, 0.3)
    offset = dist[:, None] * direction + swing[:, None] * perp + lift[:, None] * np.array([0.0, 0.0, 1.0])
    root[:, 1] = root[:, 0] + offset
    return MotionSample(theta=theta, beta=beta, root=root, interaction_level=interaction_level)


def _splat_add(img: np.ndarray, cx: float, cy: float, amp: float, sigma: float,
               combine: str = "add") -> None:
    """Accumulate a Gaussian splat into `img` within a 4-sigma window."""
    h, w = img.shape
    r = int(math.ceil(4.0 * sigma))
    x0, x1 = max(0, int(math.floor(cx)) - r), min(w, int(math.floor(cx)) + r + 1)
    y0, y1 = max(0, int(math.floor(cy)) - r), min(h, int(math.floor(cy)) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=np.float64) - cx
    ys = np.arange(y0, y1, dtype=np.float64) - cy
    g = amp * np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2.0 * sigma * sigma))
    if combine == "add":
        img[y0:y1, x0:x1] += g
    else:
        np.maximum(img[y0:y1, x0:x1], g, out=img[y0:y1, x0:x1])


def render_crop(hand: HandOutput, box: BoundingBox, cam: WeakPerspectiveCamera,
                size: tuple[int, int], splat_sigma: float = 1.5,
                depth_span: float = 0.15) -> np.ndarray:
    """Rasterize a hand into a multi-channel crop.

    Channels: wrist splat, five per-finger splat groups, and a normalized
    depth channel (per-joint splats whose amplitude encodes depth relative
    to the root). Values are clamped to [0, 1]; a hand entirely outside the
    box yields an all-zero crop. Returns float32 (channels, h, w).
    """
    h, w = size
    if box.s_x <= 0 or box.s_y <= 0:
        raise ValueError(f"degenerate box: sides ({box.s_x}, {box.s_y})")
    px = cam.scale * hand.joints[:, :2] + np.array([cam.t_x, cam.t_y])
    u = np.array([w / box.s_x, h / box.s_y])
    crop_xy = (px - box.corner) * u

    out = np.zeros((7, h, w), dtype=np.float64)
    _splat_add(out[0], crop_xy[0, 0], crop_xy[0, 1], 1.0, splat_sigma)
    for f, group in enumerate(FINGER_JOINT_GROUPS):
        for j in group:
            _splat_add(out[1 + f], crop_xy[j, 0], crop_xy[j, 1], 1.0, splat_sigma)
    z_rel = hand.joints[:, 2] - hand.joints[0, 2]
    depth = np.clip(0.5 + z_rel / (2.0 * depth_span), 0.0, 1.0)
    for j in range(hand.joints.shape[0]):
        _splat_add(out[6], crop_xy[j, 0], crop_xy[j, 1], float(depth[j]), splat_sigma, "max")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class SequenceSample:
    """One generated sequence; arrays are float32 with hand axis 0 = right."""

    crops: np.ndarray  # (T, 2, C, crop_h, crop_w)
    boxes: np.ndarray  # (T, 2, 4) image-pixel [c_x, c_y, s_x, s_y]
    theta: np.ndarray  # (T, 2, 48)
    beta: np.ndarray  # (T, 2, 10)
    upsilon: np.ndarray  # (T, 3)
    cams: np.ndarray  # (T, 2, 3) crop-space (scale, t_x, t_y)
    joints: np.ndarray  # (T, 2, 21, 3) right-root-centered, meters
    verts: np.ndarray  # (T, 2, N_v, 3)
    j2d: np.ndarray  # (T, 2, 21, 2) crop pixels
    fps: float
    seed: int

    @property
    def T(self) -> int:
        return self.crops.shape[0]

    @property
    def gt(self) -> Prediction:
        return Prediction.from_stacked(self.theta, self.beta, self.upsilon, self.cams)

    def box(self, t: int, hand: int) -> BoundingBox:
        return BoundingBox(*(float(v) for v in self.boxes[t, hand]))

    def frame(self, t: int) -> dict:
        """Per-frame record view keyed like the on-disk layout."""
        gt = Prediction.from_stacked(self.theta[t], self.beta[t], self.upsilon[t], self.cams[t])
        return {
            "crop_R": self.crops[t, 0], "crop_L": self.crops[t, 1],
            "box_R": self.box(t, 0), "box_L": self.box(t, 1),
            "gt": gt,
            "J_R": self.joints[t, 0], "J_L": self.joints[t, 1],
            "V_R": self.verts[t, 0], "V_L": self.verts[t, 1],
            "j2d_R": self.j2d[t, 0], "j2d_L": self.j2d[t, 1],
        }

    def copy(self) -> "SequenceSample":
        return SequenceSample(
            crops=self.crops.copy(), boxes=self.boxes.copy(), theta=self.theta.copy(),
            beta=self.beta.copy(), upsilon=self.upsilon.copy(), cams=self.cams.copy(),
            joints=self.joints.copy(), verts=self.verts.copy(), j2d=self.j2d.copy(),
            fps=self.fps, seed=self.seed,
        )


def _sequence_geometry(model: HandModel, theta32: np.ndarray, beta32: np.ndarray,
                       upsilon32: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Root-centered float32 geometry from quantized parameters.

    Shared by generation and verification so both follow the identical
    float64 compute path and quantization points: (T,2,21,3) joints and
    (T,2,N_v,3) vertices; the left hand is offset by upsilon.
    """
    T = theta32.shape[0]
    joints = np.zeros((T, 2, 21, 3), dtype=np.float32)
    verts = np.zeros((T, 2, model.template.n_vertices, 3), dtype=np.float32)
    ups = upsilon32.astype(np.float64)
    for h, side in enumerate(("right", "left")):
        th = torch.from_numpy(theta32[:, h].astype(np.float64))
        be = torch.from_numpy(beta32[:, h].astype(np.float64))
        with torch.no_grad():
            v, j = model.forward(th, be, side=side)
        v = v.numpy()
        j = j.numpy()
        root = j[:, 0:1, :].copy()
        v -= root
        j -= root
        if h == 1:
            v = v + ups[:, None, :]
            j = j + ups[:, None, :]
        joints[:, h] = j.astype(np.float32)
        verts[:, h] = v.astype(np.float32)
    return joints, verts


def _fit_box(px: np.ndarray, render: RenderConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Padded, aspect-locked box (float64 [c_x, c_y, s_x, s_y]) around 2D points."""
    lo = px.min(axis=0)
    hi = px.max(axis=0)
    center = (lo + hi) / 2.0
    extent = np.maximum(hi - lo, 1e-6) * render.margin
    aspect = render.crop_h / render.crop_w  # s_y / s_x
    s_x = max(extent[0], extent[1] / aspect, 24.0)
    s_y = s_x * aspect
    if rng is not None:
        center = center + rng.uniform(-render.box_center_jitter, render.box_center_jitter, 2)
        s_x = s_x * (1.0 + rng.uniform(-render.box_scale_jitter, render.box_scale_jitter))
        s_y = s_x * aspect
    return np.array([center[0], center[1], s_x, s_y])


def generate_sample(config: DatasetConfig, sample_seed: int, model: HandModel) -> SequenceSample:
    """Build one sequence: motion, GT geometry, boxes, cameras, crops, noise."""
    T = config.T
    render = config.render
    motion = _draw_motion(config, sample_seed)
    rng_cam = np.random.default_rng((sample_seed, 1))
    rng_box = np.random.default_rng((sample_seed, 2))
    rng_noise = np.random.default_rng((sample_seed, 3))

    # Quantize parameters first; all stored geometry derives from these.
    theta32 = motion.theta.astype(np.float32)
    beta32 = np.repeat(motion.beta[None, :, :], T, axis=0).astype(np.float32)
    upsilon32 = (motion.root[:, 1] - motion.root[:, 0]).astype(np.float32)
    joints, verts = _sequence_geometry(model, theta32, beta32, upsilon32)

    # One global weak-perspective view per sequence; the effective image
    # offset folds in the right root so stored (right-root-centered)
    # geometry projects directly.
    sigma = rng_cam.uniform(*config.cam_scale)
    img_w, img_h = config.image_size
    mid = (motion.root[:, 0] + motion.root[:, 1]).mean(axis=0) / 2.0
    origin = np.array([img_w / 2.0, img_h / 2.0]) - sigma * mid[:2] + rng_cam.uniform(-10, 10, 2)

    boxes = np.zeros((T, 2, 4), dtype=np.float32)
    cams = np.zeros((T, 2, 3), dtype=np.float32)
    j2d = np.zeros((T, 2, 21, 2), dtype=np.float32)
    crops = np.zeros((T, 2, render.channels, render.crop_h, render.crop_w), dtype=np.float32)
    for t in range(T):
        r_R = motion.root[t, 0]
        o_eff = sigma * r_R[:2] + origin
        for h in range(2):
            px = sigma * joints[t, h, :, :2].astype(np.float64) + o_eff
            boxes[t, h] = _fit_box(px, render, rng_box).astype(np.float32)
            bx = boxes[t, h].astype(np.float64)
            u = render.crop_w / bx[2]
            cam = np.array([
                sigma * u,
                u * (o_eff[0] - (bx[0] - bx[2] / 2.0)),
                u * (o_eff[1] - (bx[1] - bx[3] / 2.0)),
            ])
            cams[t, h] = cam.astype(np.float32)
            cam64 = cams[t, h].astype(np.float64)
            j2d[t, h] = (
                cam64[0] * joints[t, h, :, :2].astype(np.float64) + cam64[1:]
            ).astype(np.float32)
            hand = HandOutput(vertices=verts[t, h].astype(np.float64),
                              joints=joints[t, h].astype(np.float64))
            crops[t, h] = render_crop(
                hand,
                BoundingBox(*bx),
                WeakPerspectiveCamera(sigma, o_eff[0], o_eff[1]),
                (render.crop_h, render.crop_w),
                splat_sigma=render.splat_sigma,
                depth_span=render.depth_span,
            )
    if render.noise_std > 0:
        noise = rng_noise.normal(0.0, render.noise_std, crops.shape)
        crops = np.clip(crops.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)

    return SequenceSample(
        crops=crops, boxes=boxes, theta=theta32, beta=beta32, upsilon=upsilon32,
        cams=cams, joints=joints, verts=verts, j2d=j2d,
        fps=config.fps, seed=int(sample_seed),
    )


def _draw_motion(config: DatasetConfig, sample_seed: int) -> MotionSample:
    level_rng = np.random.default_rng((sample_seed, 0))
    lo, hi = config.interaction
    level = float(level_rng.uniform(lo, hi))
    return sample_motion(sample_seed, config.T, level, gap=config.gap,
                         fps_source=config.fps_source,
                         far_distance=config.far_distance,
                         near_distance=config.near_distance)


_SAMPLE_FIELDS = ("crops", "boxes", "theta", "beta", "upsilon", "cams", "joints", "verts", "j2d")


def _field_shapes(config: DatasetConfig) -> dict[str, tuple[int, ...]]:
    T, nv, r = config.T, config.n_vertices, config.render
    return {
        "crops": (T, 2, r.channels, r.crop_h, r.crop_w),
        "boxes": (T, 2, 4),
        "theta": (T, 2, 48),
        "beta": (T, 2, 10),
        "upsilon": (T, 3),
        "cams": (T, 2, 3),
        "joints": (T, 2, 21, 3),
        "verts": (T, 2, nv, 3),
        "j2d": (T, 2, 21, 2),
    }


def make_dataset(config: DatasetConfig, out_dir: Path, template: HandTemplate | None = None) -> Path:
    """Generate `config.count` sequences into out_dir/{manifest.json,data.bin}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if template is None:
        template = build_template(config.template_seed, config.n_vertices)
    model = HandModel(template, dtype=torch.float64)
    seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(config.count, dtype=np.uint64)]

    shapes = _field_shapes(config)
    floats_per_sample = sum(int(np.prod(s)) for s in shapes.values())
    blob_path = out_dir / "data.bin"
    import hashlib

    digest = hashlib.sha256()
    with open(blob_path, "wb") as f:
        for i in range(config.count):
            sample = generate_sample(config, seeds[i], model)
            for name in _SAMPLE_FIELDS:
                raw = np.ascontiguousarray(getattr(sample, name), dtype="<f4").tobytes()
                f.write(raw)
                digest.update(raw)
    manifest = {
        "format": "ratsir-dataset-v1",
        "count": config.count,
        "T": config.T,
        "gap": config.gap,
        "fps_source": config.fps_source,
        "fps": config.fps,
        "source_span": config.source_span,
        "n_vertices": config.n_vertices,
        "template_seed": config.template_seed,
        "config": config.to_dict(),
        "sample_seeds": seeds,
        "fields": [{"name": n, "shape": list(shapes[n])} for n in _SAMPLE_FIELDS],
        "floats_per_sample": floats_per_sample,
        "bytes_per_sample": 4 * floats_per_sample,
        "blob": "data.bin",
        "blob_sha256": digest.hexdigest(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


class Dataset:
    """Memory-mapped reader for a generated dataset directory."""

    def __init__(self, path: Path, verify_hash: bool = False):
        self.path = Path(path)
        manifest_path = self.path / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.path}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("format") != "ratsir-dataset-v1":
            raise DataIntegrityError(f"unrecognized dataset format in {manifest_path}")
        self.config = DatasetConfig.from_dict(self.manifest["config"])
        blob = self.path / self.manifest["blob"]
        expected = self.manifest["count"] * self.manifest["bytes_per_sample"]
        actual = blob.stat().st_size if blob.exists() else -1
        if actual != expected:
            raise DataIntegrityError(
                f"blob size mismatch: expected {expected} bytes, found {actual}"
            )
        if verify_hash and blobio.sha256_file(blob) != self.manifest["blob_sha256"]:
            raise DataIntegrityError("blob sha256 mismatch")
        self._mm = np.memmap(blob, dtype="<f4", mode="r")
        self._shapes = {f["name"]: tuple(f["shape"]) for f in self.manifest["fields"]}
        self._sizes = {n: int(np.prod(s)) for n, s in self._shapes.items()}
        self._per_sample = self.manifest["floats_per_sample"]

    def __len__(self) -> int:
        return self.manifest["count"]

    def __getitem__(self, i: int) -> SequenceSample:
        if not 0 <= i < len(self):
            raise IndexError(i)
        base = i * self._per_sample
        fields = {}
        off = base
        for name in _SAMPLE_FIELDS:
            size = self._sizes[name]
            fields[name] = np.array(self._mm[off : off + size]).reshape(self._shapes[name])
            off += size
        return SequenceSample(
            fps=self.manifest["fps"], seed=int(self.manifest["sample_seeds"][i]), **fields
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(path: Path, verify_hash: bool = False) -> Dataset:
    return Dataset(path, verify_hash=verify_hash)


def verify_sample(sample: SequenceSample, model: HandModel) -> None:
    """GT self-consistency: regenerate joints/vertices from stored parameters
    and 2D joints from stored cameras; raise DataIntegrityError on any
    bitwise mismatch."""
    joints, verts = _sequence_geometry(model, sample.theta, sample.beta, sample.upsilon)
    if not (np.array_equal(joints, sample.joints) and np.array_equal(verts, sample.verts)):
        raise DataIntegrityError("stored geometry does not match forward kinematics")
    cam64 = sample.cams.astype(np.float64)
    j2d = (cam64[..., 0:1, None] * sample.joints.astype(np.float64)[..., :2]
           + cam64[..., None, 1:3]).astype(np.float32)
    if not np.array_equal(j2d, sample.j2d):
        raise DataIntegrityError("stored 2D joints do not match camera projection")
    if not np.array_equal(sample.upsilon, sample.joints[:, 1, 0] - sample.joints[:, 0, 0]):
        raise DataIntegrityError("upsilon does not equal the stored left-right root offset")


def inject_occlusion(sample: SequenceSample, mode: str, seed: int,
                     frames=None, strength: float = 1.0, side: str = "left",
                     patch: int = 8) -> SequenceSample:
    """Return a copy with occluded crops; ground truth is untouched.

    patch_mask zeroes a random contiguous patch-aligned block (area fraction
    ~ strength) in one random crop; frame_blackout zeroes the chosen side's
    crops at `frames` (a random frame when None).
    """
    out = sample.copy()
    rng = np.random.default_rng(seed)
    hand_idx = {"right": [0], "left": [1], "both": [0, 1]}[side]
    if mode == "patch_mask":
        if strength < 0 or strength > 1:
            raise ValueError(f"strength must be in [0, 1], got {strength}")
        gh = sample.crops.shape[-2] // patch
        gw = sample.crops.shape[-1] // patch
        bh = int(round(gh * math.sqrt(strength)))
        bw = int(round(gw * math.sqrt(strength)))
        t = int(rng.integers(0, sample.T)) if frames is None else int(np.atleast_1d(frames)[0])
        h = int(rng.choice(hand_idx))
        if bh > 0 and bw > 0:
            y0 = int(rng.integers(0, gh - bh + 1))
            x0 = int(rng.integers(0, gw - bw + 1))
            out.crops[t, h, :, y0 * patch : (y0 + bh) * patch, x0 * patch : (x0 + bw) * patch] = 0.0
    elif mode == "frame_blackout":
        if frames is None:
            frames = [int(rng.integers(0, sample.T))]
        for t in np.atleast_1d(frames):
            for h in hand_idx:
                out.crops[int(t), h] = 0.0
    else:
        raise ValueError(f"unknown occlusion mode {mode!r}")
    return out


def flip_single_hand(crop: np.ndarray, box: BoundingBox, side: str, image_width: float):
    """Mirror a single-hand observation into its opposite-handed twin.

    The crop mirrors horizontally, the box reflects about the image's
    vertical center line, the side toggles, and a far-away sentinel box
    (10 box-widths off) stands in for the absent second hand so relation
    maps saturate. Returns (crop, box, side, sentinel_box).
    """
    flipped = np.ascontiguousarray(crop[..., ::-1])
    new_box = BoundingBox(image_width - box.c_x, box.c_y, box.s_x, box.s_y)
    new_side = "left" if side == "right" else "right"
    sentinel = BoundingBox(new_box.c_x + 10.0 * box.s_x, box.c_y, box.s_x, box.s_y)
    return flipped, new_box, new_side, sentinel


def mirror_points_x(points2d: np.ndarray, image_width: float) -> np.ndarray:
    """Reflect 2D image points about the vertical center line."""
    out = np.array(points2d, dtype=np.float64)
    out[..., 0] = image_width - out[..., 0]
    return out


def render_holistic(sample: SequenceSample, render: RenderConfig | None = None) -> np.ndarray:
    """Two-hands-in-one crops for the holistic-input variant, derived from
    stored GT: each frame's union box, with each hand splatted into its own
    7-channel group. Returns (T, 14, crop_h, crop_w) float32."""
    render = render or RenderConfig()
    T = sample.T
    out = np.zeros((T, 2 * render.channels, render.crop_h, render.crop_w), dtype=np.float32)
    for t in range(T):
        # Recover image-frame 2D joints from crop-frame ones via each box.
        img_pts = []
        for h in range(2):
            bx = sample.boxes[t, h].astype(np.float64)
            u = render.crop_w / bx[2]
            corner = bx[:2] - bx[2:] / 2.0
            img_pts.append(sample.j2d[t, h].astype(np.float64) / u + corner)
        allpts = np.concatenate(img_pts, axis=0)
        union = _fit_box(allpts, render, None)
        uu = render.crop_w / union[2]
        corner_u = union[:2] - union[2:] / 2.0
        for h in range(2):
            crop_xy = (img_pts[h] - corner_u) * uu
            group = out[t, h * render.channels : (h + 1) * render.channels]
            g64 = group.astype(np.float64)
            _splat_add(g64[0], crop_xy[0, 0], crop_xy[0, 1], 1.0, render.splat_sigma)
            for f, joints in enumerate(FINGER_JOINT_GROUPS):
                for j in joints:
                    _splat_add(g64[1 + f], crop_xy[j, 0], crop_xy[j, 1], 1.0, render.splat_sigma)
            z_rel = sample.joints[t, h, :, 2] - sample.joints[t, h, 0, 2]
            depth = np.clip(0.5 + z_rel / (2.0 * render.depth_span), 0.0, 1.0)
            for j in range(21):
                _splat_add(g64[6], crop_xy[j, 0], crop_xy[j, 1], float(depth[j]),
                           render.splat_sigma, "max")
            out[t, h * render.channels : (h + 1) * render.channels] = np.clip(g64, 0.0, 1.0)
    if render.noise_std > 0:
        rng = np.random.default_rng((sample.seed, 9))
        out = np.clip(out.astype(np.float64) + rng.normal(0.0, render.noise_std, out.shape),
                      0.0, 1.0).astype(np.float32)
    return out
