"""Iterative mask-filling inference and the segmented long-clip driver.

Decoding starts from a canvas whose anchor frames carry real tokens and every
other position carries the mask token. Each of K steps runs the model, samples
a token per masked position from the predicted softmax, scores each pick by
its log-probability plus Gumbel noise scaled by t*(1-(k+1)/K) (so the noise
anneals to zero by the final step), and commits the highest-scoring picks so
that exactly keep_count(k) positions remain masked. Temperature t randomizes
only the commit ORDER; at t=0 both the picks and the order are greedy and the
RNG is never consumed. Committed tokens are never revisited; anchors are never
touched.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, SegmentationError
from .model import ModelConfig, forward
from .rng import derive_rng, derive_seed
from .tensor import Tensor
from .tokenizer import Codebook, TokenGrid, decode, encode
from .training import SCHEDULES, gamma

__all__ = [
    "DecodeConfig",
    "StepRecord",
    "decode_trace_csv",
    "init_canvas",
    "keep_count",
    "keep_count_sequence",
    "decode_step",
    "interpolate",
    "interpolate_long",
]

THREADS_ENV = "FRAMEFILL_THREADS"


@dataclass(frozen=True)
class DecodeConfig:
    """Inference settings. Defaults: 32 steps at temperature 4.5; temperature
    scales the annealed Gumbel noise on commit confidences (0 = greedy)."""

    anchors: tuple[int, ...]
    steps: int = 32
    temperature: float = 4.5
    mask_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        anchors = tuple(int(a) for a in self.anchors)
        if not anchors:
            raise ContractError("at least one anchor frame is required")
        if len(set(anchors)) != len(anchors):
            raise ContractError(f"anchor indices repeat: {anchors}")
        if min(anchors) < 0:
            raise ContractError(f"anchor indices must be >= 0, got {anchors}")
        object.__setattr__(self, "anchors", anchors)
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.temperature < 0.0:
            raise ContractError(f"temperature must be >= 0, got {self.temperature}")
        if self.mask_schedule not in SCHEDULES:
            raise ContractError(f"mask_schedule must be one of {SCHEDULES}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    masked_before: int
    masked_after: int
    committed: np.ndarray  # flat token indices committed this step
    min_kept_confidence: float


def decode_trace_csv(trace: Sequence[StepRecord]) -> str:
    lines = ["step,masked_before,masked_after,min_kept_confidence"]
    for row in trace:
        lines.append(
            f"{row.step},{row.masked_before},{row.masked_after},"
            f"{row.min_kept_confidence:.6f}"
        )
    return "\n".join(lines) + "\n"


def init_canvas(
    anchor_tokens: Mapping[int, np.ndarray],
    n_frames: int,
    grid_h: int,
    grid_w: int,
    vocab: int,
) -> TokenGrid:
    """Anchor frames carry their tokens; every other position is masked."""
    if not anchor_tokens:
        raise ContractError("no anchor token grids supplied")
    indices = np.zeros((n_frames, grid_h, grid_w), dtype=np.int32)
    mask = np.ones((n_frames, grid_h, grid_w), dtype=bool)
    for frame, tokens in anchor_tokens.items():
        frame = int(frame)
        if not 0 <= frame < n_frames:
            raise ContractError(f"anchor frame {frame} outside [0, {n_frames})")
        tokens = np.asarray(tokens)
        if tokens.shape != (grid_h, grid_w):
            raise ContractError(
                f"anchor frame {frame} tokens shaped {tokens.shape}, "
                f"need ({grid_h}, {grid_w})"
            )
        indices[frame] = tokens
        mask[frame] = False
    return TokenGrid(indices, mask, vocab)


def keep_count_sequence(
    steps: int, total_masked: int, schedule: str = "cosine"
) -> list[int]:
    """Masked-position targets after each step: strictly decreasing until 0.

    The raw target floor(gamma((k+1)/K) * T) can stall for small T, so each
    step is clamped below the previous count; the final step always lands on
    zero. Once the sequence reaches zero it stays there.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if total_masked < 0:
        raise ContractError(f"total_masked must be >= 0, got {total_masked}")
    counts = []
    prev = total_masked
    for k in range(steps):
        raw = math.floor(gamma((k + 1) / steps, schedule) * total_masked)
        target = max(0, min(raw, prev - 1))
        if k == steps - 1:
            target = 0
        counts.append(target)
        prev = target
    return counts


def keep_count(k: int, steps: int, total_masked: int, schedule: str = "cosine") -> int:
    """Positions still masked after step k (0-based) of a K-step decode."""
    if not 0 <= k < steps:
        raise ContractError(f"step index {k} outside [0, {steps})")
    return keep_count_sequence(steps, total_masked, schedule)[k]


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    rows = logits.astype(np.float64)
    rows = rows - rows.max(axis=1, keepdims=True)
    return rows - np.log(np.exp(rows).sum(axis=1, keepdims=True))


def decode_step(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    canvas: TokenGrid,
    structure: TokenGrid,
    k: int,
    config: DecodeConfig,
    rng: np.random.Generator,
    *,
    initial_masked: int | None = None,
    struct_keep: np.ndarray | None = None,
    trace: list[StepRecord] | None = None,
) -> TokenGrid:
    """One decoding step: sample tokens at masked positions, commit the most
    confident so exactly keep_count(k, ...) remain masked.

    `initial_masked` is the canvas' masked count before step 0 — the schedule
    is anchored to it, not to the current count. At temperature > 0 each
    masked position samples its token from the softmax (Gumbel-argmax trick,
    one matrix draw); its confidence is the chosen token's log-probability
    plus Gumbel noise scaled by s = t*(1-(k+1)/K) (one vector draw, skipped
    on the final step where s = 0). At temperature 0 both the picks and the
    ordering are greedy and the RNG is never touched. Ties commit the lowest
    flat index first.
    """
    masked_before = canvas.masked_count()
    if masked_before == 0:
        raise ContractError("decode_step needs at least one masked position")
    if initial_masked is None:
        initial_masked = masked_before

    n, h, w = canvas.shape
    logits = forward(canvas, structure, params, model_config, struct_keep)
    flat_idx = np.flatnonzero(canvas.mask.reshape(-1))
    logp = _log_softmax_rows(
        logits.data.reshape(n * h * w, model_config.color_vocab)[flat_idx]
    )

    if config.temperature > 0.0:
        tokens = np.argmax(logp + rng.gumbel(size=logp.shape), axis=1)
    else:
        tokens = np.argmax(logp, axis=1)
    confidence = logp[np.arange(len(tokens)), tokens]
    s = config.temperature * (1.0 - (k + 1) / config.steps)
    if s > 0.0:
        confidence = confidence + s * rng.gumbel(size=len(tokens))

    target = keep_count(k, config.steps, initial_masked, config.mask_schedule)
    commit = max(0, masked_before - target)
    # highest confidence first; equal confidences commit the lower flat index
    order = np.lexsort((flat_idx, -confidence))[:commit]

    indices = canvas.indices.copy().reshape(-1)
    mask = canvas.mask.copy().reshape(-1)
    indices[flat_idx[order]] = tokens[order]
    mask[flat_idx[order]] = False
    out = TokenGrid(indices.reshape(n, h, w), mask.reshape(n, h, w), canvas.vocab)

    if trace is not None:
        trace.append(
            StepRecord(
                step=k,
                masked_before=masked_before,
                masked_after=out.masked_count(),
                committed=np.sort(flat_idx[order]),
                min_kept_confidence=(
                    float(confidence[order].min()) if commit else math.nan
                ),
            )
        )
    return out


def interpolate(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    anchor_frames: Mapping[int, np.ndarray],
    structure_maps: np.ndarray,
    color_codebook: Codebook,
    structure_codebook: Codebook,
    config: DecodeConfig,
    *,
    zero_structure: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list[StepRecord]]:
    """Fill the frames between anchors; returns (clip pixels, decode trace).

    Anchor frames are supplied as pixels, tokenized, and pinned; every other
    frame starts fully masked and is committed over K steps. Output anchor
    frames equal the decode(encode(anchor)) reconstruction exactly.
    `zero_structure` suppresses the structure embeddings (inference-time
    dropout of every token) to measure how much the conditioning carries.
    """
    structure_maps = np.asarray(structure_maps)
    n = structure_maps.shape[0]
    for a in config.anchors:
        if a >= n:
            raise ContractError(f"anchor frame {a} outside the {n}-frame clip")
        if a not in anchor_frames:
            raise ContractError(f"anchor frame {a} has no pixel frame supplied")

    structure = encode(structure_maps, structure_codebook)
    _, h, w = structure.shape
    anchor_tokens = {
        a: encode(np.asarray(anchor_frames[a])[None], color_codebook).indices[0]
        for a in config.anchors
    }
    canvas = init_canvas(anchor_tokens, n, h, w, color_codebook.size)

    if rng is None:
        rng = derive_rng(config.seed, "decode")
    struct_keep = np.zeros((n, h, w), dtype=np.float32) if zero_structure else None

    trace: list[StepRecord] = []
    initial_masked = canvas.masked_count()
    for k in range(config.steps):
        if canvas.masked_count() == 0:
            break
        canvas = decode_step(
            params,
            model_config,
            canvas,
            structure,
            k,
            config,
            rng,
            initial_masked=initial_masked,
            struct_keep=struct_keep,
            trace=trace,
        )
    if canvas.masked_count() != 0:
        raise ContractError(
            "internal: decoding finished with masked positions remaining"
        )
    return decode(canvas, color_codebook), trace


def interpolate_long(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    keyframes: Mapping[int, np.ndarray],
    structure_maps: np.ndarray,
    color_codebook: Codebook,
    structure_codebook: Codebook,
    config: DecodeConfig,
    *,
    zero_structure: bool = False,
    segment_seeds: Sequence[int] | None = None,
) -> np.ndarray:
    """Interpolate a long clip segment by segment between consecutive keyframes.

    Each segment runs an independent decode with anchors at its two ends and
    its own derived seed, so segments cannot influence one another; shared
    keyframes appear exactly once in the output, which spans the first through
    the last keyframe. A segment longer than the model's frame budget raises
    a SegmentationError naming a frame where an extra keyframe would split it.
    Set FRAMEFILL_THREADS>1 to decode segments in parallel.
    """
    indices = sorted(int(i) for i in keyframes)
    if len(indices) < 2:
        raise ContractError("long interpolation needs at least two keyframes")
    structure_maps = np.asarray(structure_maps)
    total = structure_maps.shape[0]
    if indices[0] < 0 or indices[-1] >= total:
        raise ContractError(
            f"keyframe indices {indices[0]}..{indices[-1]} must lie inside the "
            f"{total}-frame structure sequence"
        )
    segments = list(zip(indices[:-1], indices[1:]))
    for start, stop in segments:
        length = stop - start + 1
        if length > model_config.n_frames:
            raise SegmentationError(
                f"segment {start}..{stop} spans {length} frames but the model "
                f"handles {model_config.n_frames}; insert a keyframe near "
                f"frame {(start + stop) // 2}"
            )
    if segment_seeds is not None and len(segment_seeds) != len(segments):
        raise ContractError(
            f"{len(segment_seeds)} segment seeds for {len(segments)} segments"
        )

    def run(i: int) -> np.ndarray:
        start, stop = segments[i]
        length = stop - start + 1
        seed = (
            int(segment_seeds[i])
            if segment_seeds is not None
            else derive_seed(config.seed, "segment", i)
        )
        seg_config = replace(config, anchors=(0, length - 1), seed=seed)
        clip, _ = interpolate(
            params,
            model_config,
            {0: keyframes[start], length - 1: keyframes[stop]},
            structure_maps[start : stop + 1],
            color_codebook,
            structure_codebook,
            seg_config,
            zero_structure=zero_structure,
        )
        return clip

    threads = int(os.environ.get(THREADS_ENV, "1") or "1")
    if threads > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            clips = list(pool.map(run, range(len(segments))))
    else:
        clips = [run(i) for i in range(len(segments))]

    first, last = indices[0], indices[-1]
    sample = clips[0]
    out = np.empty((last - first + 1,) + sample.shape[1:], dtype=sample.dtype)
    for (start, stop), clip in zip(segments, clips):
        out[start - first : stop - first + 1] = clip
    return out
