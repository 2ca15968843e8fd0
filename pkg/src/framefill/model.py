"""The token transformer: window-restricted attention over video token grids.

Input is a pair of token grids (color, possibly masked; structure, never
masked). Every position embeds as the sum of four learned rows:

    color embedding + structure embedding + spatial position + frame position

A shallow strided convolution halves the spatial grid, L transformer blocks
alternate per-frame ("spatial") and cross-frame ("tube") window attention,
each followed by an MLP, all pre-norm residual; a transposed convolution
restores the grid and a linear head emits per-position logits over the color
vocabulary. The mask token's embedding row sits at index `color_vocab`.

Window restriction is the point: spatial attention never mixes frames, and
tube attention mixes all frames but only within an h_w x w_w spatial window,
so its score-matrix cost is (h_w*w_w)/(h*w) of global attention's, exactly.
`score_multiplies` states that analytically and the tensor core's multiply
counter can verify it against instrumented execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .errors import ContractError, GeometryError
from .tensor import Tensor
from .tokenizer import TokenGrid

__all__ = [
    "ModelConfig",
    "init_parameters",
    "parameter_names",
    "embed",
    "spatial_window_attention",
    "tube_window_attention",
    "joint_keyframe_attention",
    "forward",
    "score_multiplies",
    "SCORE_LABEL",
    "MIX_LABEL",
]

SCORE_LABEL = "attention_scores"
MIX_LABEL = "attention_mix"


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and capacity of the token transformer."""

    n_frames: int = 8  # maximum clip length (temporal table rows)
    grid_h: int = 8  # token grid height
    grid_w: int = 8
    color_vocab: int = 64  # mask token id == color_vocab
    structure_vocab: int = 32
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    window_h: int = 4  # tube window extents on the post-conv grid
    window_w: int = 4
    conv_factor: int = 2  # 1 (no resampling) or 2
    structure_dropout: float = 0.1

    def __post_init__(self):
        if self.n_frames < 1:
            raise ContractError("n_frames must be >= 1")
        if self.grid_h < 1 or self.grid_w < 1:
            raise GeometryError("token grid must be at least 1x1")
        if self.color_vocab < 1 or self.structure_vocab < 1:
            raise ContractError("vocabularies must be >= 1")
        if self.embed_dim < 1 or self.heads < 1 or self.blocks < 1:
            raise ContractError("embed_dim, heads and blocks must be >= 1")
        if self.embed_dim % self.heads:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.conv_factor not in (1, 2):
            raise ContractError(f"conv_factor must be 1 or 2, got {self.conv_factor}")
        if self.grid_h % self.conv_factor or self.grid_w % self.conv_factor:
            raise GeometryError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by conv factor "
                f"{self.conv_factor}"
            )
        ih, iw = self.inner_grid
        if not 1 <= self.window_h <= ih or not 1 <= self.window_w <= iw:
            raise GeometryError(
                f"window {self.window_h}x{self.window_w} must fit the post-conv "
                f"grid {ih}x{iw}"
            )
        if ih % self.window_h or iw % self.window_w:
            raise GeometryError(
                f"post-conv grid {ih}x{iw} not divisible by window "
                f"{self.window_h}x{self.window_w}"
            )
        if not 0.0 <= self.structure_dropout <= 1.0:
            raise ContractError("structure_dropout must lie in [0, 1]")

    @property
    def mask_id(self) -> int:
        return self.color_vocab

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def inner_grid(self) -> tuple[int, int]:
        return (self.grid_h // self.conv_factor, self.grid_w // self.conv_factor)

    def with_frames(self, n_frames: int) -> "ModelConfig":
        return replace(self, n_frames=n_frames)


def parameter_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order: init, optimizer and checkpoints all use it."""
    names = ["color_embed", "struct_embed", "pos_spatial", "pos_temporal"]
    if config.conv_factor > 1:
        names += ["conv_down.kernel", "conv_down.bias", "conv_up.kernel", "conv_up.bias"]
    for b in range(config.blocks):
        for sub in ("spatial", "mlp1", "tube", "mlp2"):
            base = f"block{b}.{sub}"
            names += [f"{base}.norm.gain", f"{base}.norm.bias"]
            if sub in ("spatial", "tube"):
                for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
                    names.append(f"{base}.{p}")
            else:
                names += [f"{base}.w1", f"{base}.b1", f"{base}.w2", f"{base}.b2"]
    names += ["final_norm.gain", "final_norm.bias", "head.weight", "head.bias"]
    return names


def _param_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    c = config.embed_dim
    hidden = 4 * c
    fixed = {
        "color_embed": (config.color_vocab + 1, c),
        "struct_embed": (config.structure_vocab, c),
        "pos_spatial": (config.grid_h * config.grid_w, c),
        "pos_temporal": (config.n_frames, c),
        "conv_down.kernel": (3, 3, c, c),
        "conv_down.bias": (c,),
        "conv_up.kernel": (3, 3, c, c),
        "conv_up.bias": (c,),
        "head.weight": (c, config.color_vocab),
        "head.bias": (config.color_vocab,),
    }
    if name in fixed:
        return fixed[name]
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gain", "bias"):
        return (c,)
    return {
        "wq": (c, c), "wk": (c, c), "wv": (c, c), "wo": (c, c),
        "bq": (c,), "bk": (c,), "bv": (c,), "bo": (c,),
        "w1": (c, hidden), "b1": (hidden,), "w2": (hidden, c), "b2": (c,),
    }[leaf]


def init_parameters(
    config: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Initialize parameters in canonical order (deterministic per Generator).

    Weights are N(0, 0.02); the residual-branch output projections (wo, w2)
    shrink by 1/sqrt(4*blocks) so depth does not inflate the residual stream;
    norm gains start at 1, every bias and norm offset at 0.
    """
    residual_scale = 1.0 / math.sqrt(4.0 * config.blocks)
    params: dict[str, Tensor] = {}
    for name in parameter_names(config):
        shape = _param_shape(name, config)
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            value = np.ones(shape)
        elif leaf in ("bias", "bq", "bk", "bv", "bo", "b1", "b2"):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, 0.02, size=shape)
            if leaf in ("wo", "w2"):
                value *= residual_scale
        params[name] = Tensor(np.ascontiguousarray(value, dtype=dtype))
    return params


def _check_grids(color: TokenGrid, structure: TokenGrid, config: ModelConfig) -> None:
    n, h, w = color.shape
    if structure.shape != (n, h, w):
        raise GeometryError(
            f"structure grid {structure.shape} != color grid {color.shape}"
        )
    if (h, w) != (config.grid_h, config.grid_w):
        raise GeometryError(
            f"grid {h}x{w} does not match the configured {config.grid_h}x{config.grid_w}"
        )
    if not 1 <= n <= config.n_frames:
        raise ContractError(
            f"clip length {n} outside [1, {config.n_frames}] supported by the model"
        )
    if structure.mask.any():
        raise ContractError("structure grids must be fully observed (no mask flags)")
    if color.vocab > config.color_vocab:
        raise ContractError(
            f"color grid vocab {color.vocab} exceeds model vocab {config.color_vocab}"
        )
    if structure.vocab > config.structure_vocab:
        raise ContractError(
            f"structure grid vocab {structure.vocab} exceeds model vocab "
            f"{config.structure_vocab}"
        )


def embed(
    color: TokenGrid,
    structure: TokenGrid,
    params: dict[str, Tensor],
    config: ModelConfig,
    struct_keep: np.ndarray | None = None,
) -> Tensor:
    """Sum the four embedding lookups into (n, h, w, c) features.

    Masked color positions look up the mask row (id == color_vocab).
    `struct_keep`, if given, is an (n, h, w) 0/1 array multiplying the
    structure term per position (1 keeps it, 0 drops that row exactly).
    """
    _check_grids(color, structure, config)
    n, h, w = color.shape
    color_ids = np.where(color.mask, config.mask_id, color.indices).reshape(-1)
    ec = tc.embedding(params["color_embed"], color_ids)
    es = tc.embedding(params["struct_embed"], structure.indices.reshape(-1))
    if struct_keep is not None:
        keep = np.asarray(struct_keep)
        if keep.shape != (n, h, w):
            raise GeometryError(
                f"struct_keep shape {keep.shape} must be {(n, h, w)}"
            )
        es = tc.mul_const(es, keep.reshape(-1, 1))
    spatial_ids = np.tile(np.arange(h * w, dtype=np.int64), n)
    temporal_ids = np.repeat(np.arange(n, dtype=np.int64), h * w)
    ps = tc.embedding(params["pos_spatial"], spatial_ids)
    pt = tc.embedding(params["pos_temporal"], temporal_ids)
    x = tc.add(tc.add(ec, es), tc.add(ps, pt))
    return tc.reshape(x, (n, h, w, config.embed_dim))


def _attention_core(
    windows: Tensor, params: dict[str, Tensor], prefix: str, heads: int
) -> Tensor:
    """Multi-head self-attention inside each window of a (B, T, c) stack."""
    b, t, c = windows.shape
    dh = c // heads
    flat = tc.reshape(windows, (b * t, c))

    def project(w_name: str, b_name: str) -> Tensor:
        out = tc.add_bias(tc.matmul(flat, params[f"{prefix}.{w_name}"]),
                          params[f"{prefix}.{b_name}"])
        out = tc.reshape(out, (b, t, heads, dh))
        return tc.transpose(out, (0, 2, 1, 3))  # (B, heads, T, dh)

    q = project("wq", "bq")
    k = project("wk", "bk")
    v = project("wv", "bv")
    with tc.multiply_label(SCORE_LABEL):
        scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2)))  # (B, heads, T, T)
    scores = tc.scale(scores, 1.0 / math.sqrt(dh))
    weights = tc.softmax(scores)
    with tc.multiply_label(MIX_LABEL):
        mixed = tc.matmul(weights, v)  # (B, heads, T, dh)
    merged = tc.reshape(tc.transpose(mixed, (0, 2, 1, 3)), (b * t, c))
    out = tc.add_bias(tc.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return tc.reshape(out, (b, t, c))


def spatial_window_attention(
    x: Tensor, params: dict[str, Tensor], prefix: str, heads: int
) -> Tensor:
    """Self-attention within each frame; no information crosses frames."""
    if x.ndim != 4:
        raise GeometryError(f"expected (n, h, w, c) features, got {x.shape}")
    n, h, w, c = x.shape
    windows = tc.reshape(x, (n, h * w, c))
    out = _attention_core(windows, params, prefix, heads)
    return tc.reshape(out, (n, h, w, c))


def tube_window_attention(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    window_h: int,
    window_w: int,
) -> Tensor:
    """Self-attention within each full-length spatio-temporal tube.

    A tube spans every frame but only an (window_h, window_w) spatial window,
    so the score matrix per tube is (n*window_h*window_w)^2.
    """
    if x.ndim != 4:
        raise GeometryError(f"expected (n, h, w, c) features, got {x.shape}")
    n, h, w, c = x.shape
    if h % window_h or w % window_w:
        raise GeometryError(
            f"grid {h}x{w} not divisible by window {window_h}x{window_w}"
        )
    gh, gw = h // window_h, w // window_w
    tiles = tc.reshape(x, (n, gh, window_h, gw, window_w, c))
    tiles = tc.transpose(tiles, (1, 3, 0, 2, 4, 5))  # (gh, gw, n, wh, ww, c)
    windows = tc.reshape(tiles, (gh * gw, n * window_h * window_w, c))
    out = _attention_core(windows, params, prefix, heads)
    tiles = tc.reshape(out, (gh, gw, n, window_h, window_w, c))
    tiles = tc.transpose(tiles, (2, 0, 3, 1, 4, 5))  # (n, gh, wh, gw, ww, c)
    return tc.reshape(tiles, (n, h, w, c))


def joint_keyframe_attention(
    queries: Tensor,
    keys: list[Tensor],
    values: list[Tensor],
    head_dim: int | None = None,
    return_weights: bool = False,
):
    """Attention of one frame's queries over the concatenated key/value rows
    of an ordered set of frames: Softmax(Q [K_1..K_m]^T / sqrt(d)) [V_1..V_m].

    With a single frame's keys/values this is plain self-attention. Attention
    weights over each row sum to 1. Duplicating a frame in the set splits its
    weight mass evenly across the copies and leaves the output unchanged.
    """
    if queries.ndim != 2:
        raise GeometryError(f"queries must be (T_q, d), got {queries.shape}")
    if not keys or len(keys) != len(values):
        raise ContractError("keys and values must be equal-length, nonempty lists")
    d = queries.shape[1]
    for kf, vf in zip(keys, values):
        if kf.ndim != 2 or kf.shape[1] != d:
            raise GeometryError(f"key block {kf.shape} incompatible with dim {d}")
        if vf.shape[0] != kf.shape[0]:
            raise GeometryError("each value block must pair rows with its key block")
    k = keys[0] if len(keys) == 1 else tc.concat(keys, axis=0)
    v = values[0] if len(values) == 1 else tc.concat(values, axis=0)
    with tc.multiply_label(SCORE_LABEL):
        scores = tc.matmul(queries, tc.transpose(k, (1, 0)))
    scores = tc.scale(scores, 1.0 / math.sqrt(head_dim if head_dim else d))
    weights = tc.softmax(scores)
    with tc.multiply_label(MIX_LABEL):
        out = tc.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    shape = x.shape
    flat = tc.reshape(x, (int(np.prod(shape[:-1])), shape[-1]))
    h = tc.add_bias(tc.matmul(flat, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    h = tc.gelu(h)
    out = tc.add_bias(tc.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return tc.reshape(out, shape)


def _prenorm(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return tc.layer_norm(x, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])


def forward(
    color: TokenGrid,
    structure: TokenGrid,
    params: dict[str, Tensor],
    config: ModelConfig,
    struct_keep: np.ndarray | None = None,
) -> Tensor:
    """Full model: token grids in, (n, h, w, color_vocab) logits out."""
    x = embed(color, structure, params, config, struct_keep)
    n = color.shape[0]
    if config.conv_factor > 1:
        x = tc.conv2d(
            x, params["conv_down.kernel"], params["conv_down.bias"], stride=2, padding=1
        )
    for b in range(config.blocks):
        base = f"block{b}"
        x = tc.add(x, spatial_window_attention(
            _prenorm(x, params, f"{base}.spatial"), params, f"{base}.spatial", config.heads
        ))
        x = tc.add(x, _mlp(_prenorm(x, params, f"{base}.mlp1"), params, f"{base}.mlp1"))
        x = tc.add(x, tube_window_attention(
            _prenorm(x, params, f"{base}.tube"), params, f"{base}.tube",
            config.heads, config.window_h, config.window_w,
        ))
        x = tc.add(x, _mlp(_prenorm(x, params, f"{base}.mlp2"), params, f"{base}.mlp2"))
    x = tc.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    if config.conv_factor > 1:
        x = tc.conv2d_transpose(
            x, params["conv_up.kernel"], params["conv_up.bias"],
            stride=2, padding=1, output_padding=1,
        )
    flat = tc.reshape(x, (n * config.grid_h * config.grid_w, config.embed_dim))
    logits = tc.add_bias(tc.matmul(flat, params["head.weight"]), params["head.bias"])
    return tc.reshape(logits, (n, config.grid_h, config.grid_w, config.color_vocab))


def score_multiplies(kind: str, config: ModelConfig, n_frames: int | None = None) -> int:
    """Analytic scalar-multiply count of one attention layer's score matmul.

    kind: "spatial" (per-frame windows), "tube" (full-length spatial windows),
    or "global" (one window over every token). Counts Q K^T multiplies on the
    post-conv grid: windows * heads * T^2 * head_dim.
    """
    n = config.n_frames if n_frames is None else n_frames
    ih, iw = config.inner_grid
    if kind == "spatial":
        windows, t = n, ih * iw
    elif kind == "tube":
        windows = (ih // config.window_h) * (iw // config.window_w)
        t = n * config.window_h * config.window_w
    elif kind == "global":
        windows, t = 1, n * ih * iw
    else:
        raise ContractError(f"unknown attention kind {kind!r}")
    return windows * config.heads * t * t * config.head_dim
