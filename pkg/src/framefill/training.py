"""Masked-token training: the mask schedule, anchored corruption, structure
dropout, cross-entropy restricted to masked positions, AdamW, and the loop.

One training step: pick a clip, draw a corruption level r, replace a
schedule-determined number of color tokens on non-anchor frames with the mask
token, drop each structure embedding with probability p, run the model, score
cross-entropy at exactly the masked positions, and take an optimizer step.
The loss gradient at every unmasked logit is exactly zero by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as tc
from .errors import ContractError, DomainError, TrainingDivergedError
from .model import ModelConfig, forward, init_parameters
from .rng import derive_rng
from .tensor import Tensor
from .tokenizer import Codebook, TokenGrid, encode

__all__ = [
    "SCHEDULES",
    "gamma",
    "corrupt",
    "structure_keep_mask",
    "structure_dropout",
    "mtm_loss",
    "TrainConfig",
    "TraceRow",
    "learning_rate",
    "AdamW",
    "train",
    "trace_to_csv",
]

SCHEDULES = ("cosine", "linear")


def gamma(r: float, schedule: str = "cosine") -> float:
    """Mask fraction at corruption level r: gamma(0)=1, gamma(1)=0, monotone."""
    r = float(r)
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"corruption level r={r} outside [0, 1]")
    if schedule == "cosine":
        return math.cos(math.pi * r / 2.0)
    if schedule == "linear":
        return 1.0 - r
    raise ContractError(f"unknown mask schedule {schedule!r}; use one of {SCHEDULES}")


def corrupt(
    color: TokenGrid,
    r: float,
    anchors: Iterable[int],
    rng: np.random.Generator,
    schedule: str = "cosine",
) -> tuple[TokenGrid, np.ndarray]:
    """Mask exactly floor(gamma(r) * free_frames * h * w) non-anchor positions.

    Positions are drawn uniformly without replacement from the non-anchor
    frames; anchor frames are never touched. Returns the corrupted grid and
    the boolean (n, h, w) array of newly masked positions.
    """
    n, h, w = color.shape
    anchor_set = frozenset(int(a) for a in anchors)
    for a in anchor_set:
        if not 0 <= a < n:
            raise ContractError(f"anchor frame {a} outside [0, {n})")
    free = np.array([f for f in range(n) if f not in anchor_set], dtype=np.int64)
    if free.size == 0:
        raise ContractError("anchors cover every frame; nothing to corrupt")
    count = math.floor(gamma(r, schedule) * free.size * h * w)

    candidates = (free[:, None] * (h * w) + np.arange(h * w)[None, :]).reshape(-1)
    chosen = rng.choice(candidates, size=count, replace=False)
    new_mask = np.zeros(n * h * w, dtype=bool)
    new_mask[chosen] = True
    new_mask = new_mask.reshape(n, h, w)
    corrupted = TokenGrid(color.indices.copy(), color.mask | new_mask, color.vocab)
    return corrupted, new_mask


def structure_keep_mask(
    shape: Sequence[int], p: float, rng: np.random.Generator
) -> np.ndarray:
    """0/1 keep flags, each position independently dropped with probability p."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability p={p} outside [0, 1)")
    if p == 0.0:
        return np.ones(tuple(shape), dtype=np.float32)
    return (rng.random(tuple(shape)) >= p).astype(np.float32)


def structure_dropout(
    rows: np.ndarray, p: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero whole embedding rows independently with probability p."""
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ContractError(f"expected (positions, dim) rows, got {rows.shape}")
    keep = structure_keep_mask(rows.shape[:1], p, rng)
    return rows * keep[:, None].astype(rows.dtype)


def mtm_loss(logits: Tensor, truth: TokenGrid, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over exactly the masked positions.

    Only the gathered logit rows enter the graph, so the gradient at every
    unmasked position's logits is identically zero (no buffer is written).
    """
    mask = np.asarray(mask, dtype=bool)
    n, h, w = truth.shape
    if logits.shape[:3] != (n, h, w):
        raise ContractError(
            f"logits leading shape {logits.shape[:3]} != grid shape {(n, h, w)}"
        )
    if mask.shape != (n, h, w):
        raise ContractError(f"mask shape {mask.shape} != grid shape {(n, h, w)}")
    if truth.mask[mask].any():
        raise ContractError("ground-truth grid is masked at scored positions")
    rows = np.flatnonzero(mask.reshape(-1))
    if rows.size == 0:
        raise ContractError("no masked positions to score")
    targets = truth.indices.reshape(-1)[rows]
    flat = tc.reshape(logits, (n * h * w, logits.shape[-1]))
    return tc.cross_entropy(tc.gather_rows(flat, rows), targets)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are tuned for desk-scale runs."""

    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 3e-3
    warmup_steps: int = 50
    weight_decay: float = 0.01  # decoupled, matrices only
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    structure_dropout: float | None = None  # None: use the model config's rate
    mask_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be >= 1")
        if self.learning_rate <= 0.0 or self.warmup_steps < 0:
            raise ContractError("learning_rate must be > 0, warmup_steps >= 0")
        if self.weight_decay < 0.0:
            raise ContractError("weight_decay must be >= 0")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ContractError("betas must lie in (0, 1)")
        if self.structure_dropout is not None and not 0.0 <= self.structure_dropout < 1.0:
            raise ContractError("structure_dropout must lie in [0, 1)")
        if self.mask_schedule not in SCHEDULES:
            raise ContractError(f"mask_schedule must be one of {SCHEDULES}")


class TraceRow(NamedTuple):
    step: int
    loss: float
    learning_rate: float
    mask_ratio: float


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay toward zero."""
    if step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    progress = (step - config.warmup_steps) / span
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to matrix-shaped parameters."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        """Apply one update from the accumulated gradients, then clear them."""
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay and p.data.ndim >= 2:
                update = update + c.weight_decay * p.data
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)
            p.grad = None


def _draw_training_r(rng: np.random.Generator, candidates: int, schedule: str) -> float:
    # reject levels whose mask count floors to zero: a step must score something
    while True:
        r = float(rng.random())
        if math.floor(gamma(r, schedule) * candidates) >= 1:
            return r


def train(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    color_codebook: Codebook,
    structure_codebook: Codebook,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: dict[str, Tensor] | None = None,
) -> tuple[dict[str, Tensor], list[TraceRow]]:
    """Optimize the model on (clip, structure-map sequence) pairs.

    Clips are tokenized once up front. Every step draws its clip choice,
    corruption level, mask positions, and dropout flags from an RNG derived
    from (seed, "step", step), so traces are bit-reproducible. Anchors during
    training are always the first and last frame.
    """
    if not dataset:
        raise ContractError("training needs at least one clip")
    p_drop = (
        train_config.structure_dropout
        if train_config.structure_dropout is not None
        else model_config.structure_dropout
    )

    pairs: list[tuple[TokenGrid, TokenGrid]] = []
    for clip, maps in dataset:
        color = encode(clip, color_codebook)
        structure = encode(maps, structure_codebook)
        if color.shape != structure.shape:
            raise ContractError(
                f"clip tokens {color.shape} and structure tokens {structure.shape} "
                "disagree; check the two codebooks' patch sizes"
            )
        if color.shape[0] < 3:
            raise ContractError(
                "training clips need at least one frame between the two anchors"
            )
        pairs.append((color, structure))

    if params is None:
        params = init_parameters(model_config, derive_rng(train_config.seed, "init"))
    optimizer = AdamW(params, train_config)
    trace: list[TraceRow] = []

    for step in range(train_config.steps):
        rng = derive_rng(train_config.seed, "step", step)
        lr = learning_rate(step, train_config)
        losses = []
        ratios = []
        for _ in range(train_config.batch_size):
            color, structure = pairs[int(rng.integers(len(pairs)))]
            n, h, w = color.shape
            free = (n - 2) * h * w
            r = _draw_training_r(rng, free, train_config.mask_schedule)
            corrupted, new_mask = corrupt(
                color, r, (0, n - 1), rng, train_config.mask_schedule
            )
            keep = structure_keep_mask((n, h, w), p_drop, rng)
            with tc.Tape() as tape:
                logits = forward(corrupted, structure, params, model_config, keep)
                loss = mtm_loss(logits, color, new_mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step}; "
                    "lower the learning rate or check the data"
                )
            tape.backward(loss)
            losses.append(value)
            ratios.append(new_mask.sum() / free)
        if train_config.batch_size > 1:
            inv = 1.0 / train_config.batch_size
            for p in params.values():
                if p.grad is not None:
                    p.grad *= np.asarray(inv, dtype=p.grad.dtype)
        optimizer.step(lr)
        trace.append(
            TraceRow(step, float(np.mean(losses)), lr, float(np.mean(ratios)))
        )
    return params, trace


def trace_to_csv(trace: Sequence[TraceRow]) -> str:
    lines = ["step,loss,learning_rate,mask_ratio"]
    for row in trace:
        lines.append(
            f"{row.step},{row.loss:.8f},{row.learning_rate:.8e},{row.mask_ratio:.6f}"
        )
    return "\n".join(lines) + "\n"
