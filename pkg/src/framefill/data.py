"""Synthetic clips, structure maps, and structure-preserving color edits.

Clips are (N, H, W, 3) float32 arrays in [0, 1]: flat-color rectangles and
disks on a solid background, moving with constant per-frame velocity. A clip
is a pure function of its ClipSpec; all randomness lives in the spec sampler.

Luminance is defined as the green channel. Structure maps are the normalized
Sobel gradient magnitude of luminance, so any edit that leaves green untouched
leaves every structure map bit-identical. synth_edit exploits this: hue
rotation spins the (R-G, B-G) chroma plane around the untouched green channel,
which makes "edits never change structure" an exact property rather than an
approximate one.

Container MVID: magic "MVID", version u16, N/H/W/C u32, float32 pixels,
row-major, little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, GeometryError
from .rng import derive_rng

__all__ = [
    "BACKGROUND_PALETTE",
    "SHAPE_PALETTE",
    "ShapeSpec",
    "ClipSpec",
    "EditSpec",
    "gen_clip",
    "luminance",
    "extract_edges",
    "structure_sequence",
    "synth_edit",
    "random_clip_spec",
    "make_dataset",
    "save_clip",
    "load_clip",
]

_VIDEO_MAGIC = b"MVID"
_FORMAT_VERSION = 1

_SOBEL_NORM = 4.0 * math.sqrt(2.0)  # peak gradient magnitude for [0,1] inputs


@dataclass(frozen=True)
class ShapeSpec:
    """One moving shape: axis-aligned 'rect' or 'disk', flat color."""

    kind: str  # "rect" | "disk"
    color: tuple[float, float, float]
    center: tuple[float, float]  # (y, x) at frame 0
    velocity: tuple[float, float]  # (dy, dx) pixels per frame
    half_h: float  # vertical half-extent (radius for disks)
    half_w: float = -1.0  # horizontal half-extent; disks ignore it

    def __post_init__(self):
        if self.kind not in ("rect", "disk"):
            raise ContractError(f"unknown shape kind {self.kind!r}")
        if self.kind == "disk" and self.half_w >= 0 and self.half_w != self.half_h:
            raise ContractError("disks are round: half_w must be unset or equal half_h")
        if self.half_h <= 0:
            raise ContractError("shape extent must be positive")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ContractError(f"color must lie in [0,1]^3, got {self.color}")

    @property
    def extent(self) -> tuple[float, float]:
        if self.kind == "disk":
            return (self.half_h, self.half_h)
        return (self.half_h, self.half_w)


@dataclass(frozen=True)
class ClipSpec:
    """Geometry and content of one clip; rendering is pure in this spec."""

    n_frames: int
    height: int
    width: int
    background: tuple[float, float, float]
    shapes: tuple[ShapeSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ContractError(f"a clip needs at least 2 frames, got {self.n_frames}")
        if self.height < 1 or self.width < 1:
            raise GeometryError("canvas must be at least 1x1")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ContractError("background color must lie in [0,1]^3")
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for s in self.shapes:
            ey, ex = s.extent
            if s.kind == "rect" and s.half_w <= 0:
                raise ContractError("rects need a positive half_w")
            for t in (0, self.n_frames - 1):  # linear motion: extremes suffice
                cy = s.center[0] + t * s.velocity[0]
                cx = s.center[1] + t * s.velocity[1]
                if cy - ey < 0 or cy + ey > self.height - 1 or cx - ex < 0 or cx + ex > self.width - 1:
                    raise ContractError(
                        f"shape leaves the canvas at frame {t}: center ({cy}, {cx})"
                    )


def gen_clip(spec: ClipSpec) -> np.ndarray:
    """Render (N, H, W, 3) float32 frames; later shapes draw over earlier."""
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]
    clip = np.empty((spec.n_frames, spec.height, spec.width, 3), dtype=np.float32)
    bg = np.asarray(spec.background, dtype=np.float32)
    for t in range(spec.n_frames):
        frame = np.broadcast_to(bg, (spec.height, spec.width, 3)).copy()
        for s in spec.shapes:
            cy = s.center[0] + t * s.velocity[0]
            cx = s.center[1] + t * s.velocity[1]
            if s.kind == "disk":
                inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= s.half_h**2
            else:
                inside = (np.abs(ys - cy) <= s.half_h) & (np.abs(xs - cx) <= s.half_w)
            frame[inside] = np.asarray(s.color, dtype=np.float32)
        clip[t] = frame
    return clip


def luminance(frames: np.ndarray) -> np.ndarray:
    """Green channel of (..., H, W, 3) frames (peak photopic sensitivity)."""
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[-1] != 3:
        raise GeometryError(f"expected (..., H, W, 3) frames, got {frames.shape}")
    return frames[..., 1]


def extract_edges(frames: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Normalized Sobel gradient magnitude of luminance, in [0, 1].

    Accepts one frame (H, W, 3) or a clip (N, H, W, 3) and returns maps with
    the same leading shape. Borders replicate edge pixels, so a constant frame
    maps to exactly zero. Values below `threshold` are set to 0.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0,1], got {threshold}")
    lum = luminance(frames)
    if lum.ndim not in (2, 3):
        raise GeometryError(f"expected (H, W, 3) or (N, H, W, 3), got {np.shape(frames)}")
    if lum.shape[-1] < 2 or lum.shape[-2] < 2:
        raise GeometryError("frames must be at least 2x2 for gradients")
    pad = [(0, 0)] * (lum.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(lum, pad, mode="edge")
    left = p[..., 0:-2, 0:-2] + 2.0 * p[..., 1:-1, 0:-2] + p[..., 2:, 0:-2]
    right = p[..., 0:-2, 2:] + 2.0 * p[..., 1:-1, 2:] + p[..., 2:, 2:]
    top = p[..., 0:-2, 0:-2] + 2.0 * p[..., 0:-2, 1:-1] + p[..., 0:-2, 2:]
    bottom = p[..., 2:, 0:-2] + 2.0 * p[..., 2:, 1:-1] + p[..., 2:, 2:]
    gx = right - left
    gy = bottom - top
    mag = np.sqrt(gx * gx + gy * gy) / np.float32(_SOBEL_NORM)
    mag = mag.astype(np.float32, copy=False)
    if threshold > 0.0:
        mag[mag < threshold] = 0.0
    return np.clip(mag, 0.0, 1.0)


def structure_sequence(clip: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Structure maps (N, H, W) for a clip."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise GeometryError(f"expected a (N, H, W, 3) clip, got {clip.shape}")
    return extract_edges(clip, threshold)


@dataclass(frozen=True)
class EditSpec:
    """A pure per-pixel color edit.

    hue_deg rotates the (R-G, B-G) chroma plane around the luminance (green)
    channel. With luminance_preserving=True (the default) green is copied bit
    for bit, so structure maps cannot change. Setting it False additionally
    scales luminance by `brightness`. background_swap, if given, is a pair
    (bg_color, extra_deg): pixels exactly equal to bg_color rotate by
    hue_deg + extra_deg instead, recoloring the background without touching
    its luminance.
    """

    hue_deg: float = 0.0
    luminance_preserving: bool = True
    brightness: float = 1.0
    background_swap: tuple[tuple[float, float, float], float] | None = None

    def __post_init__(self):
        if self.luminance_preserving and self.brightness != 1.0:
            raise ContractError(
                "brightness != 1 contradicts luminance_preserving=True"
            )
        if self.brightness < 0:
            raise ContractError("brightness must be nonnegative")


def _exact_cos_sin(deg: float) -> tuple[float, float]:
    r = deg % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if r in exact:
        return exact[r]
    theta = math.radians(r)
    return (math.cos(theta), math.sin(theta))


def synth_edit(frames: np.ndarray, edit: EditSpec) -> np.ndarray:
    """Apply an EditSpec to (..., H, W, 3) frames; returns float32 frames.

    The luminance channel of the output is the input's, bit for bit, whenever
    the edit is luminance-preserving; hence extract_edges(synth_edit(x, e))
    equals extract_edges(x) exactly.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim < 3 or frames.shape[-1] != 3:
        raise GeometryError(f"expected (..., H, W, 3) frames, got {frames.shape}")
    identity_rotation = edit.hue_deg % 360.0 == 0.0 and edit.background_swap is None
    if identity_rotation and edit.brightness == 1.0:
        return frames.copy()

    g = frames[..., 1].astype(np.float64)
    u = frames[..., 0].astype(np.float64) - g
    v = frames[..., 2].astype(np.float64) - g

    cos_t, sin_t = _exact_cos_sin(edit.hue_deg)
    u_rot = u * cos_t - v * sin_t
    v_rot = u * sin_t + v * cos_t

    if edit.background_swap is not None:
        bg_color, extra_deg = edit.background_swap
        bg = np.asarray(bg_color, dtype=np.float32)
        is_bg = (frames == bg).all(axis=-1)
        cos_b, sin_b = _exact_cos_sin(edit.hue_deg + extra_deg)
        u_rot = np.where(is_bg, u * cos_b - v * sin_b, u_rot)
        v_rot = np.where(is_bg, u * sin_b + v * cos_b, v_rot)

    out = np.empty_like(frames)
    out[..., 0] = np.clip(g + u_rot, 0.0, 1.0).astype(np.float32)
    out[..., 2] = np.clip(g + v_rot, 0.0, 1.0).astype(np.float32)
    if edit.luminance_preserving:
        out[..., 1] = frames[..., 1]
    else:
        out[..., 1] = np.clip(g * edit.brightness, 0.0, 1.0).astype(np.float32)
    return out


# Fixed palettes instead of continuous color draws: flat regions across any
# dataset then take at most len(BACKGROUND_PALETTE) + len(SHAPE_PALETTE)
# distinct values, which a 64-entry color codebook covers exactly (quantizer
# capacity goes to the shape boundaries, where the signal actually lives).
# All coordinates are multiples of 1/32 (float32-exact) and every chroma
# radius stays below min(g, 1-g), so any hue rotation remains inside [0,1]
# without clamping. Backgrounds are dark (g <= 0.28), shapes bright
# (g >= 0.59), keeping shape-background luminance contrast >= 0.3.
BACKGROUND_PALETTE: tuple[tuple[float, float, float], ...] = (
    (0.1875, 0.125, 0.0625),
    (0.125, 0.1875, 0.25),
    (0.25, 0.25, 0.1875),
    (0.21875, 0.28125, 0.34375),
)
SHAPE_PALETTE: tuple[tuple[float, float, float], ...] = (
    (0.90625, 0.75, 0.625),
    (0.5625, 0.625, 0.8125),
    (0.75, 0.8125, 0.6875),
    (0.875, 0.84375, 0.90625),
    (0.625, 0.59375, 0.5),
    (0.6875, 0.71875, 0.84375),
)


def random_clip_spec(
    rng: np.random.Generator,
    n_frames: int = 8,
    height: int = 32,
    width: int = 32,
    min_shapes: int = 1,
    max_shapes: int = 3,
) -> ClipSpec:
    """Sample a ClipSpec with integer positions and nonzero integer velocities;
    colors come from the fixed palettes, so shapes contrast with the
    background in luminance."""
    if not 1 <= min_shapes <= max_shapes:
        raise ContractError("need 1 <= min_shapes <= max_shapes")
    background = BACKGROUND_PALETTE[int(rng.integers(len(BACKGROUND_PALETTE)))]
    shapes = []
    n_shapes = int(rng.integers(min_shapes, max_shapes + 1))
    for _ in range(n_shapes):
        kind = "rect" if rng.random() < 0.5 else "disk"
        half_h = int(rng.integers(3, 7))
        half_w = half_h if kind == "disk" else int(rng.integers(3, 7))
        for _attempt in range(64):
            vy = int(rng.integers(-2, 3))
            vx = int(rng.integers(-2, 3))
            end_dy, end_dx = vy * (n_frames - 1), vx * (n_frames - 1)
            y_lo = half_h + max(0, -end_dy)
            y_hi = height - 1 - half_h - max(0, end_dy)
            x_lo = half_w + max(0, -end_dx)
            x_hi = width - 1 - half_w - max(0, end_dx)
            if (vy, vx) != (0, 0) and y_lo <= y_hi and x_lo <= x_hi:
                break
        else:
            raise ContractError("could not place a shape inside the canvas")
        cy = int(rng.integers(y_lo, y_hi + 1))
        cx = int(rng.integers(x_lo, x_hi + 1))
        shapes.append(
            ShapeSpec(
                kind=kind,
                color=SHAPE_PALETTE[int(rng.integers(len(SHAPE_PALETTE)))],
                center=(float(cy), float(cx)),
                velocity=(float(vy), float(vx)),
                half_h=float(half_h),
                half_w=float(half_w) if kind == "rect" else -1.0,
            )
        )
    return ClipSpec(
        n_frames=n_frames,
        height=height,
        width=width,
        background=background,
        shapes=tuple(shapes),
    )


def make_dataset(
    seed: int,
    n_clips: int,
    *,
    n_frames: int = 8,
    height: int = 32,
    width: int = 32,
    min_shapes: int = 1,
    max_shapes: int = 3,
    structure_threshold: float = 0.0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic list of (clip, structure maps) pairs under one seed."""
    out = []
    for i in range(n_clips):
        spec = random_clip_spec(
            derive_rng(seed, "clip", i), n_frames, height, width, min_shapes, max_shapes
        )
        clip = gen_clip(spec)
        out.append((clip, structure_sequence(clip, structure_threshold)))
    return out


def save_clip(frames: np.ndarray, path: str | Path) -> None:
    """Write an MVID container; accepts (N,H,W,3), (N,H,W,1) or (N,H,W)."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise GeometryError(f"expected (N, H, W, C) pixels, got {frames.shape}")
    n, h, w, c = frames.shape
    with open(path, "wb") as f:
        f.write(_VIDEO_MAGIC)
        f.write(struct.pack("<H", _FORMAT_VERSION))
        f.write(struct.pack("<4I", n, h, w, c))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_clip(path: str | Path) -> np.ndarray:
    """Read an MVID container back to (N, H, W, C) float32."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _VIDEO_MAGIC:
            raise FormatError(f"{path}: not a clip file")
        header = f.read(18)
        if len(header) != 18:
            raise FormatError(f"{path}: truncated header")
        version, n, h, w, c = struct.unpack("<H4I", header)
        if version != _FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = f.read(4 * n * h * w * c)
        if len(payload) != 4 * n * h * w * c:
            raise FormatError(f"{path}: truncated pixel payload")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(n, h, w, c)
    return pixels.copy()
