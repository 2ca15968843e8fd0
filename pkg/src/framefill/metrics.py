"""Evaluation metrics for filled clips.

PSNR and SSIM score frames against a reference on the [0,1] pixel scale.
Temporal coherence is a descriptor proxy: each frame's luminance is
mean-pooled to an 8x8 grid and consecutive descriptors are compared by
cosine; it is deliberately not a learned-embedding metric and is reported
under its own name. A linear anchor blend provides the trivial baseline
that any learned interpolator must beat.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import luminance
from .errors import ContractError, GeometryError

__all__ = [
    "PSNR_CAP",
    "psnr",
    "ssim",
    "temporal_consistency",
    "linear_blend_baseline",
    "metrics_report",
]

PSNR_CAP = 99.0
DESCRIPTOR_GRID = 8


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB on [0,1] pixels, capped at 99 (identical inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _window_means(x: np.ndarray, window: int) -> np.ndarray:
    return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> float:
    """Mean local SSIM over valid uniform windows, per channel.

    Accepts (H, W) or (H, W, C) frames. Exactly 1.0 when a and b are
    bit-identical: every sub-expression is computed symmetrically, so the
    per-window numerator and denominator coincide bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise GeometryError(f"expected (H, W) or (H, W, C), got {a.shape}")
    if window < 1:
        raise GeometryError(f"window must be >= 1, got {window}")
    if a.shape[0] < window or a.shape[1] < window:
        raise GeometryError(
            f"frame {a.shape[0]}x{a.shape[1]} smaller than window {window}"
        )
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _window_means(x, window)
        mu_y = _window_means(y, window)
        var_x = _window_means(x * x, window) - mu_x * mu_x
        var_y = _window_means(y * y, window) - mu_y * mu_y
        cov = _window_means(x * y, window) - mu_x * mu_y
        s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        scores.append(s.mean())
    return float(np.mean(scores))


def frame_descriptor(frames: np.ndarray) -> np.ndarray:
    """Luminance mean-pooled to an 8x8 grid: (..., H, W, 3) -> (..., 64)."""
    lum = luminance(np.asarray(frames, dtype=np.float64))
    h, w = lum.shape[-2:]
    g = DESCRIPTOR_GRID
    if h % g or w % g:
        raise GeometryError(
            f"frame {h}x{w} not divisible by the {g}x{g} descriptor grid"
        )
    lead = lum.shape[:-2]
    pooled = lum.reshape(lead + (g, h // g, g, w // g)).mean(axis=(-3, -1))
    return pooled.reshape(lead + (g * g,))


def temporal_consistency(clip: np.ndarray) -> float:
    """Mean cosine similarity of consecutive frames' pooled descriptors.

    All-zero descriptor pairs score 1.0 (nothing changed); a zero against a
    nonzero scores 0.0. Invariant to uniform brightness scaling of the clip.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise GeometryError(f"expected a clip (N, H, W, 3), got {clip.shape}")
    if clip.shape[0] < 2:
        raise ContractError(
            f"temporal consistency needs >= 2 frames, got {clip.shape[0]}"
        )
    d = frame_descriptor(clip)
    x, y = d[:-1], d[1:]
    dots = (x * y).sum(axis=1)
    nx = np.sqrt((x * x).sum(axis=1))
    ny = np.sqrt((y * y).sum(axis=1))
    both_zero = (nx == 0.0) & (ny == 0.0)
    one_zero = ((nx == 0.0) | (ny == 0.0)) & ~both_zero
    denom = np.where(nx * ny == 0.0, 1.0, nx * ny)
    cos = dots / denom
    cos = np.where(both_zero, 1.0, cos)
    cos = np.where(one_zero, 0.0, cos)
    return float(cos.mean())


def linear_blend_baseline(
    anchor_frames: Mapping[int, np.ndarray], n_frames: int
) -> np.ndarray:
    """Per-frame linear interpolation between the flanking anchor frames.

    Frames before the first anchor copy it; frames after the last copy it;
    a frame between anchors i < j is the ((j-k)*frame_i + (k-i)*frame_j)/(j-i)
    blend. This is the no-model baseline a learned fill must beat.
    """
    if not anchor_frames:
        raise ContractError("at least one anchor frame is required")
    indices = sorted(int(i) for i in anchor_frames)
    if indices[0] < 0 or indices[-1] >= n_frames:
        raise ContractError(
            f"anchor indices {indices} must lie in [0, {n_frames})"
        )
    frames = {i: np.asarray(anchor_frames[i], dtype=np.float64) for i in indices}
    sample = frames[indices[0]]
    out = np.empty((n_frames,) + sample.shape, dtype=np.float64)
    for k in range(n_frames):
        if k <= indices[0]:
            out[k] = frames[indices[0]]
        elif k >= indices[-1]:
            out[k] = frames[indices[-1]]
        else:
            j = int(np.searchsorted(indices, k))
            hi = indices[j]
            if hi == k:
                out[k] = frames[k]
                continue
            lo = indices[j - 1]
            t = (k - lo) / (hi - lo)
            out[k] = (1.0 - t) * frames[lo] + t * frames[hi]
    return out.astype(np.float32)


def metrics_report(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]]
) -> str:
    """One CSV row per (output clip, reference clip) pair.

    psnr and ssim are means over per-frame scores against the reference;
    temporal_consistency is computed on the output clip alone.
    """
    lines = ["clip,psnr,ssim,temporal_consistency"]
    for i, (out, ref) in enumerate(pairs):
        out = np.asarray(out)
        ref = np.asarray(ref)
        if out.shape != ref.shape:
            raise GeometryError(
                f"clip {i}: output shape {out.shape} != reference {ref.shape}"
            )
        p = float(np.mean([psnr(o, r) for o, r in zip(out, ref)]))
        s = float(np.mean([ssim(o, r) for o, r in zip(out, ref)]))
        t = temporal_consistency(out)
        lines.append(f"{i},{p:.4f},{s:.6f},{t:.6f}")
    return "\n".join(lines) + "\n"
