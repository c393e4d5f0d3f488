"""Synthetic sprite video with ground truth, Lab conversion and frame pyramids."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import load_archive, save_archive

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array([[0.412453, 0.357580, 0.180423],
                     [0.212671, 0.715160, 0.072169],
                     [0.019334, 0.119193, 0.950227]])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
D65_WHITE = _RGB2XYZ.sum(axis=1)

# encoder-side normalization: (lab - LAB_MEAN) / LAB_RANGE
LAB_MEAN = np.array([50.0, 0.0, 0.0])
LAB_RANGE = np.array([100.0, 200.0, 200.0])

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


class DataError(ValueError):
    pass


def rgb_to_lab(rgb, normalize: bool = False) -> np.ndarray:
    """CIE Lab (D65) of an RGB array in [0, 1] with channels last."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise DataError(f"expected 3 channels, got shape {rgb.shape}")
    if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
        raise DataError("RGB values must lie in [0, 1]")
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = lin @ _RGB2XYZ.T / D65_WHITE
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    lab = np.stack([L, a, b], axis=-1)
    return normalize_lab(lab) if normalize else lab


def lab_to_rgb(lab, normalized: bool = False) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    if normalized:
        lab = denormalize_lab(lab)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f ** 3 > _EPS, f ** 3, (116.0 * f - 16.0) / _KAPPA) * D65_WHITE
    lin = xyz @ _XYZ2RGB.T
    lin = np.clip(lin, 0.0, None)
    rgb = np.where(lin > 0.0031308, 1.055 * lin ** (1 / 2.4) - 0.055, 12.92 * lin)
    return np.clip(rgb, 0.0, 1.0)


def normalize_lab(lab) -> np.ndarray:
    return (np.asarray(lab) - LAB_MEAN) / LAB_RANGE


def denormalize_lab(lab) -> np.ndarray:
    return np.asarray(lab) * LAB_RANGE + LAB_MEAN


def frame_pyramid(frame, strides) -> list[np.ndarray]:
    """Sample the pixel at the centre of each stride-s cell: index s*k + s//2."""
    frame = np.asarray(frame)
    H, W = frame.shape[-3], frame.shape[-2]
    levels = []
    for s in strides:
        if H % s or W % s:
            raise DataError(f"frame {H}x{W} not divisible by stride {s}")
        o = s // 2
        levels.append(frame[..., o::s, o::s, :])
    return levels


def downsample_labels(onehot, stride: int) -> np.ndarray:
    """Average-pool a (H, W, C) one-hot map into soft labels at ``stride``."""
    H, W, C = onehot.shape
    if H % stride or W % stride:
        raise DataError(f"label map {H}x{W} not divisible by stride {stride}")
    return onehot.reshape(H // stride, stride, W // stride, stride, C).mean(axis=(1, 3))


# ------------------------------------------------------------------- textures
N_TEXTURE_CLASSES = 32


def texture(class_id: int, h: int, w: int, rng: np.random.Generator | None = None,
            instance_jitter: bool = True) -> np.ndarray:
    """Procedural RGB texture in [0, 1] keyed by class id (checker/stripes/noise/gradient mix).

    The class decides the family, palette and frequency; ``rng`` adds a random
    phase and pixel noise and, with ``instance_jitter``, palette and
    orientation jitter.
    """
    crng = np.random.default_rng(10_000 + class_id)
    family = class_id % 4
    c1, c2 = crng.uniform(0.1, 0.9, 3), crng.uniform(0.1, 0.9, 3)
    freq = crng.uniform(0.15, 0.6)
    angle = crng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi) if rng is not None else 0.0
    if rng is not None and instance_jitter:
        c1 = np.clip(c1 + rng.normal(0.0, 0.08, 3), 0.0, 1.0)
        c2 = np.clip(c2 + rng.normal(0.0, 0.08, 3), 0.0, 1.0)
        angle += rng.normal(0.0, 0.2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    if family == 0:
        t = (np.sin(freq * u + phase) > 0) ^ (np.sin(freq * v + phase) > 0)
        t = t.astype(np.float64)
    elif family == 1:
        t = 0.5 + 0.5 * np.sin(freq * u + phase)
    elif family == 2:
        t = 0.5 + 0.25 * (np.sin(freq * u + phase) + np.sin(1.7 * freq * v - phase))
    else:
        r = np.hypot(u - u.mean(), v - v.mean())
        t = 0.5 + 0.5 * np.sin(freq * r + phase)
    img = c1 * t[..., None] + c2 * (1.0 - t[..., None])
    if rng is not None:
        img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def sprite_image(class_id: int, size: int, rng: np.random.Generator, bg_class: int | None = None) -> np.ndarray:
    """Square image of a textured disc/square sprite over a background texture.

    The background class is drawn per image unless ``bg_class`` is given.
    """
    if bg_class is None:
        bg_class = int(rng.integers(0, N_TEXTURE_CLASSES))
    bg = texture(bg_class, size, size, rng)
    bg = 0.5 * bg + 0.25
    radius = rng.uniform(0.3, 0.45) * size
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    mask = _shape_mask(class_id % 2, size, size, cy, cx, radius)
    fg = texture(class_id, size, size, rng)
    return np.where(mask[..., None], fg, bg)


def _shape_mask(kind: int, H: int, W: int, cy: float, cx: float, radius: float, angle: float = 0.0):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    if kind == 0:
        return dy * dy + dx * dx <= radius * radius
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    return (np.abs(u) <= radius) & (np.abs(v) <= radius)


# ---------------------------------------------------------------------- clips
@dataclass
class ClipConfig:
    n_sprites: int = 2
    texture_classes: tuple[int, ...] = tuple(range(N_TEXTURE_CLASSES))
    motion: int = 3
    occluder: bool = False
    H: int = 64
    W: int = 64
    length: int = 8
    sprite_size: tuple[int, int] = (20, 28)
    rotation: float = 0.0
    fixed_velocity: tuple[int, int] | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class SynthClip:
    frames: np.ndarray            # (T, H, W, 3) RGB in [0, 1]
    gt_masks: np.ndarray          # (T, H, W) int, 0 = background
    gt_flow: np.ndarray           # (T-1, H, W, 2) (dy, dx) from t to t+1
    seed: int
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def lab(self) -> np.ndarray:
        return rgb_to_lab(self.frames, normalize=True)


def synth_clip(config: ClipConfig | None = None, **overrides) -> SynthClip:
    """Render textured sprites moving over a textured background.

    Sprites translate with an integer velocity (|v| <= motion per axis),
    bouncing off the frame borders, and optionally rotate by ``rotation``
    radians per frame. An optional grey occluder bar sweeps across the scene
    on top of everything and is labelled background.
    """
    cfg = config or ClipConfig()
    if overrides:
        cfg = ClipConfig(**{**asdict(cfg), **overrides})
    H, W, T_len = cfg.H, cfg.W, cfg.length
    if H < 1 or W < 1 or T_len < 1:
        raise DataError("clip extents must be positive")
    smin, smax = cfg.sprite_size
    if smax > min(H, W) or smin < 2:
        raise DataError(f"sprite size {cfg.sprite_size} does not fit a {H}x{W} frame")
    rng = np.random.default_rng(cfg.seed)
    bg_class = int(rng.choice(cfg.texture_classes))
    background = 0.5 * texture(bg_class, H, W, rng, instance_jitter=False) + 0.25

    sprites = []
    for k in range(cfg.n_sprites):
        size = int(rng.integers(smin, smax + 1))
        cls = int(rng.choice(cfg.texture_classes))
        kind = int(rng.integers(0, 2))
        pos = np.array([rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)], dtype=np.int64)
        if cfg.fixed_velocity is not None:
            vel = np.array(cfg.fixed_velocity, dtype=np.int64)
        elif cfg.motion > 0:
            vel = rng.integers(-cfg.motion, cfg.motion + 1, 2)
            if not vel.any():
                vel[int(rng.integers(0, 2))] = 1 if rng.random() < 0.5 else -1
        else:
            vel = np.zeros(2, dtype=np.int64)
        tex = texture(cls, size, size, rng, instance_jitter=False)
        sprites.append(dict(size=size, kind=kind, pos=pos, vel=vel, tex=tex, angle=0.0))

    occ = None
    if cfg.occluder:
        width = max(4, W // 8)
        occ = dict(x=int(rng.integers(-width, W // 4)), width=width, speed=max(1, W // T_len + 1))

    frames = np.empty((T_len, H, W, 3))
    masks = np.zeros((T_len, H, W), dtype=np.int64)
    flows = np.zeros((max(T_len - 1, 0), H, W, 2))
    states = []
    for t in range(T_len):
        img = background.copy()
        mask = np.zeros((H, W), dtype=np.int64)
        frame_state = []
        for k, sp in enumerate(sprites, start=1):
            size, (py, px) = sp["size"], sp["pos"]
            local = _shape_mask(sp["kind"], size, size, size / 2, size / 2, size / 2 - 0.5, sp["angle"])
            tex = sp["tex"]
            if sp["angle"]:
                tex = _rotate_nn(tex, sp["angle"])
            ys, xs = np.nonzero(local)
            img[py + ys, px + xs] = tex[ys, xs]
            mask[py + ys, px + xs] = k
            frame_state.append((py, px, size, sp["angle"]))
        if occ is not None:
            x0, x1 = max(occ["x"], 0), min(occ["x"] + occ["width"], W)
            if x1 > x0:
                img[:, x0:x1] = 0.45
                mask[:, x0:x1] = 0
        frames[t] = img
        masks[t] = mask
        states.append((frame_state, None if occ is None else (occ["x"], occ["width"])))
        # advance
        for sp in sprites:
            nxt = sp["pos"] + sp["vel"]
            for ax, lim in enumerate((H, W)):
                if nxt[ax] < 0 or nxt[ax] + sp["size"] > lim:
                    sp["vel"][ax] = -sp["vel"][ax]
                    back = sp["pos"][ax] + sp["vel"][ax]
                    if back < 0 or back + sp["size"] > lim:
                        sp["vel"][ax] = 0
            sp["pos"] = sp["pos"] + sp["vel"]
            sp["angle"] += cfg.rotation
        if occ is not None:
            occ["x"] += occ["speed"]

    for t in range(T_len - 1):
        flows[t] = _flow_between(masks[t], states[t], states[t + 1])
    return SynthClip(frames, masks, flows, cfg.seed, cfg.to_dict())


def _rotate_nn(img: np.ndarray, angle: float) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = h / 2, w / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    ca, sa = np.cos(angle), np.sin(angle)
    sy = ca * (yy - cy) - sa * (xx - cx) + cy
    sx = sa * (yy - cy) + ca * (xx - cx) + cx
    iy = np.clip(np.floor(sy).astype(int), 0, h - 1)
    ix = np.clip(np.floor(sx).astype(int), 0, w - 1)
    return img[iy, ix]


def _flow_between(mask, state_a, state_b) -> np.ndarray:
    """Per-pixel displacement of the sprite owning each pixel at t."""
    sprites_a, _ = state_a
    sprites_b, _ = state_b
    H, W = mask.shape
    flow = np.zeros((H, W, 2))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    for k, ((ya, xa, size, ang_a), (yb, xb, _, ang_b)) in enumerate(zip(sprites_a, sprites_b), start=1):
        sel = mask == k
        if not sel.any():
            continue
        ca_y, ca_x = ya + size / 2, xa + size / 2
        cb_y, cb_x = yb + size / 2, xb + size / 2
        d = ang_b - ang_a
        cd, sd = np.cos(d), np.sin(d)
        ry, rx = yy[sel] - ca_y, xx[sel] - ca_x
        ny = cd * ry + sd * rx + cb_y
        nx = -sd * ry + cd * rx + cb_x
        flow[sel, 0] = ny - yy[sel]
        flow[sel, 1] = nx - xx[sel]
    return flow


def warp_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Forward-splat integer labels along a flow field (nearest pixel)."""
    H, W = mask.shape
    out = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    ty = np.rint(ys + flow[ys, xs, 0]).astype(int)
    tx = np.rint(xs + flow[ys, xs, 1]).astype(int)
    ok = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
    out[ty[ok], tx[ok]] = mask[ys[ok], xs[ok]]
    return out


def export_clip(clip: SynthClip, directory) -> Path:
    """Write one archive per frame plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(len(clip)):
        tensors = {"frame": clip.frames[t], "mask": clip.gt_masks[t].astype(np.int64)}
        if t < len(clip.gt_flow):
            tensors["flow"] = clip.gt_flow[t]
        save_archive(d / f"frame_{t:04d}.stta", tensors)
    manifest = {"frames": len(clip), "H": int(clip.frames.shape[1]), "W": int(clip.frames.shape[2]),
                "seed": clip.seed, "config": clip.config}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_clip(directory) -> SynthClip:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    frames, masks, flows = [], [], []
    for t in range(manifest["frames"]):
        tensors, _ = load_archive(d / f"frame_{t:04d}.stta")
        frames.append(tensors["frame"])
        masks.append(tensors["mask"])
        if "flow" in tensors:
            flows.append(tensors["flow"])
    H, W = manifest["H"], manifest["W"]
    flow = np.stack(flows) if flows else np.zeros((0, H, W, 2))
    return SynthClip(np.stack(frames), np.stack(masks), flow, manifest["seed"], manifest["config"])


# -------------------------------------------------------------- augmentation
@dataclass
class AugmentationPolicy:
    out_size: int = 32
    scale: tuple[float, float] = (0.4, 1.0)
    flip_prob: float = 0.5
    jitter: float = 0.1
    seed: int = 0

    @classmethod
    def identity(cls, size: int) -> "AugmentationPolicy":
        return cls(out_size=size, scale=(1.0, 1.0), flip_prob=0.0, jitter=0.0)


@dataclass
class AugmentDraw:
    top: int
    left: int
    size: int
    flip: bool
    shift: np.ndarray


def draw_augmentation(policy: AugmentationPolicy, image_shape, rng: np.random.Generator) -> AugmentDraw:
    H, W = image_shape[:2]
    side = min(H, W)
    lo, hi = policy.scale
    if not 0 < lo <= hi <= 1:
        raise DataError(f"crop scale range {policy.scale} must lie in (0, 1]")
    area = rng.uniform(lo, hi) if hi > lo else hi
    size = max(1, min(side, int(round(np.sqrt(area) * side))))
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    flip = bool(rng.random() < policy.flip_prob)
    shift = rng.uniform(-policy.jitter, policy.jitter, image_shape[-1]) if policy.jitter else np.zeros(image_shape[-1])
    return AugmentDraw(top, left, size, flip, shift)


def augment(image, policy: AugmentationPolicy, draw: AugmentDraw | int | None = None) -> np.ndarray:
    """Random resized crop (nearest), optional horizontal flip, per-channel shift.

    ``draw`` may be a precomputed :class:`AugmentDraw` or an integer seed.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if not isinstance(draw, AugmentDraw):
        draw = draw_augmentation(policy, image.shape, np.random.default_rng(draw))
    if draw.top < 0 or draw.left < 0 or draw.top + draw.size > H or draw.left + draw.size > W:
        raise DataError(f"crop {draw} exceeds image {H}x{W}")
    crop = image[draw.top:draw.top + draw.size, draw.left:draw.left + draw.size]
    n = policy.out_size
    idx = (np.arange(n) * draw.size) // n
    out = crop[idx][:, idx]
    if draw.flip:
        out = out[:, ::-1]
    return np.clip(out + draw.shift, 0.0, 1.0)
