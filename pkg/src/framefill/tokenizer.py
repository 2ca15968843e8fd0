"""Patch vector-quantization: k-means codebooks over 4x4 frame patches.

A frame is cut into non-overlapping patches; each patch becomes one token, the
index of its nearest codebook entry. Two codebooks exist per model: "color"
(3-channel pixels) and "structure" (single-channel structure maps). Fitting is
Lloyd's algorithm with k-means++ seeding, fully deterministic given a
Generator: distances are computed with one fixed expression, argmin ties break
to the lowest index, and empty clusters keep their previous center.

Containers:
  MTOK (token grid): magic "MTOK", version u16, channel u8 (0 color,
    1 structure), N/h/w/M u32, N*h*w token ids u16 (masked positions store 0;
    the bitmap is authoritative), mask bitmap packed MSB-first in row-major
    position order.
  MCBK (codebook): magic "MCBK", version u16, M u32, d u32, channel u8,
    patch_h u16, patch_w u16, channels u8, M*d float32 entries.
All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ContractError, FormatError, GeometryError
from .rng import derive_rng

__all__ = [
    "Codebook",
    "TokenGrid",
    "patchify",
    "unpatchify",
    "fit_codebook",
    "fit_video_codebooks",
    "encode",
    "decode",
    "reconstruction_error",
    "save_tokens",
    "load_tokens",
    "save_codebook",
    "load_codebook",
]

_CHANNELS = {"color": 3, "structure": 1}
_CHANNEL_TAGS = {"color": 0, "structure": 1}
_TAG_CHANNELS = {v: k for k, v in _CHANNEL_TAGS.items()}

_TOKENS_MAGIC = b"MTOK"
_CODEBOOK_MAGIC = b"MCBK"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Codebook:
    """A fitted set of patch centroids plus the geometry they encode."""

    entries: np.ndarray  # (M, d) float32
    channel: str  # "color" | "structure"
    patch_h: int
    patch_w: int
    iterations: int = 0
    inertia: float = 0.0

    def __post_init__(self):
        if self.channel not in _CHANNELS:
            raise ContractError(f"unknown channel tag {self.channel!r}")
        entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise GeometryError(f"entries must be (M, d), got {entries.shape}")
        expected_d = self.patch_h * self.patch_w * self.channels
        if entries.shape[1] != expected_d:
            raise GeometryError(
                f"entry dim {entries.shape[1]} != patch_h*patch_w*channels = {expected_d}"
            )
        if not np.isfinite(entries).all():
            raise ContractError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def channels(self) -> int:
        return _CHANNELS[self.channel]


@dataclass
class TokenGrid:
    """Token indices on an (N, h, w) grid with per-position mask flags.

    Every unmasked index lies in [0, vocab); values at masked positions are
    meaningless placeholders.
    """

    indices: np.ndarray  # (N, h, w) int32
    mask: np.ndarray  # (N, h, w) bool
    vocab: int

    def __post_init__(self):
        indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if indices.ndim != 3:
            raise GeometryError(f"indices must be (N, h, w), got {indices.shape}")
        if mask.shape != indices.shape:
            raise GeometryError(
                f"mask shape {mask.shape} != indices shape {indices.shape}"
            )
        if self.vocab < 1:
            raise ContractError(f"vocab must be >= 1, got {self.vocab}")
        visible = indices[~mask]
        if visible.size and (visible.min() < 0 or visible.max() >= self.vocab):
            raise ContractError(
                f"unmasked indices must lie in [0, {self.vocab}), found "
                f"[{visible.min()}, {visible.max()}]"
            )
        self.indices = indices
        self.mask = mask

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.indices.shape

    def masked_count(self) -> int:
        return int(self.mask.sum())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.indices.copy(), self.mask.copy(), self.vocab)


def _as_frames(frames: np.ndarray, channel: str) -> np.ndarray:
    """Normalize input to (N, H, W, C) for the given channel kind."""
    frames = np.asarray(frames)
    c = _CHANNELS[channel]
    if channel == "structure" and frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise GeometryError(
            f"{channel} frames must be (N, H, W, {c}), got shape {frames.shape}"
        )
    if frames.shape[-1] != c:
        raise GeometryError(
            f"{channel} frames carry {c} channel(s), got {frames.shape[-1]}"
        )
    return frames


def patchify(frames: np.ndarray, patch_h: int, patch_w: int, channel: str) -> np.ndarray:
    """Cut (N, H, W, C) frames into (N, h, w, d) patch vectors.

    Patch (i, j) covers pixel rows [i*patch_h, (i+1)*patch_h); within a patch
    the vector is row-major pixels with channels innermost.
    """
    frames = _as_frames(frames, channel)
    n, height, width, c = frames.shape
    if patch_h < 1 or patch_w < 1:
        raise GeometryError("patch dims must be >= 1")
    if height % patch_h or width % patch_w:
        raise GeometryError(
            f"frame {height}x{width} not divisible by patch {patch_h}x{patch_w}"
        )
    h, w = height // patch_h, width // patch_w
    tiles = frames.reshape(n, h, patch_h, w, patch_w, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(n, h, w, patch_h * patch_w * c))


def unpatchify(patches: np.ndarray, patch_h: int, patch_w: int, channel: str) -> np.ndarray:
    """Inverse of patchify: (N, h, w, d) -> (N, H, W, C)."""
    patches = np.asarray(patches)
    c = _CHANNELS[channel]
    if patches.ndim != 4 or patches.shape[-1] != patch_h * patch_w * c:
        raise GeometryError(
            f"patches must be (N, h, w, {patch_h * patch_w * c}), got {patches.shape}"
        )
    n, h, w, _ = patches.shape
    tiles = patches.reshape(n, h, w, patch_h, patch_w, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(n, h * patch_h, w * patch_w, c))


def _sq_distances(patches: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances (P, M), chunked to bound memory.

    One fixed expression (elementwise difference, square, sum over the vector
    axis) so encode() and any brute-force oracle agree bit for bit.
    """
    p = patches.shape[0]
    out = np.empty((p, centers.shape[0]), dtype=patches.dtype)
    chunk = max(1, (1 << 22) // max(1, centers.size))
    for start in range(0, p, chunk):
        stop = min(p, start + chunk)
        diff = patches[start:stop, None, :] - centers[None, :, :]
        out[start:stop] = (diff * diff).sum(axis=2)
    return out


def fit_codebook(
    patches: np.ndarray,
    size: int,
    rng: np.random.Generator,
    *,
    channel: str,
    patch_h: int,
    patch_w: int,
    max_iters: int = 50,
) -> Codebook:
    """Fit a codebook with k-means++ seeding and Lloyd's iterations.

    Raises CapacityError when there are fewer patches than entries requested,
    or fewer distinct patches. Deterministic given the Generator. Fitting runs
    in float64; the stored entries are float32.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise GeometryError(f"patches must be (P, d), got {patches.shape}")
    p, d = patches.shape
    if size < 1:
        raise ContractError(f"codebook size must be >= 1, got {size}")
    if p < size:
        raise CapacityError(f"{p} patches cannot seed {size} codebook entries")

    # k-means++ seeding: first center uniform, then proportional to squared
    # distance from the nearest chosen center.
    centers = np.empty((size, d), dtype=np.float64)
    centers[0] = patches[int(rng.integers(p))]
    diff = patches - centers[0]
    d2 = (diff * diff).sum(axis=1)
    for m in range(1, size):
        total = d2.sum()
        if total <= 0.0:
            raise CapacityError(
                f"fewer than {size} distinct patch vectors ({m} found)"
            )
        centers[m] = patches[int(rng.choice(p, p=d2 / total))]
        diff = patches - centers[m]
        d2 = np.minimum(d2, (diff * diff).sum(axis=1))

    assignments = np.full(p, -1, dtype=np.int64)
    inertia = 0.0
    iterations = 0
    for iterations in range(1, max_iters + 1):
        dists = _sq_distances(patches, centers)
        new_assignments = dists.argmin(axis=1)
        inertia = float(dists[np.arange(p), new_assignments].sum())
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for m in range(size):
            members = patches[assignments == m]
            if members.shape[0]:
                centers[m] = members.mean(axis=0)
    return Codebook(
        entries=centers.astype(np.float32),
        channel=channel,
        patch_h=patch_h,
        patch_w=patch_w,
        iterations=iterations,
        inertia=inertia,
    )


def fit_video_codebooks(
    dataset,
    color_size: int,
    structure_size: int,
    *,
    patch_h: int,
    patch_w: int,
    seed: int,
    max_iters: int = 50,
) -> tuple[Codebook, Codebook]:
    """Fit the color and structure codebooks over every patch of a dataset
    of (clip, structure-map sequence) pairs. Deterministic given the seed.
    """
    color_patches = []
    structure_patches = []
    for clip, maps in dataset:
        cp = patchify(clip, patch_h, patch_w, "color")
        sp = patchify(maps, patch_h, patch_w, "structure")
        color_patches.append(cp.reshape(-1, cp.shape[-1]))
        structure_patches.append(sp.reshape(-1, sp.shape[-1]))
    color = fit_codebook(
        np.concatenate(color_patches),
        color_size,
        derive_rng(seed, "codebook", "color"),
        channel="color",
        patch_h=patch_h,
        patch_w=patch_w,
        max_iters=max_iters,
    )
    structure = fit_codebook(
        np.concatenate(structure_patches),
        structure_size,
        derive_rng(seed, "codebook", "structure"),
        channel="structure",
        patch_h=patch_h,
        patch_w=patch_w,
        max_iters=max_iters,
    )
    return color, structure


def encode(frames: np.ndarray, codebook: Codebook) -> TokenGrid:
    """Map frames to their nearest-entry token grid (ties: lowest index)."""
    patches = patchify(frames, codebook.patch_h, codebook.patch_w, codebook.channel)
    n, h, w, d = patches.shape
    flat = patches.reshape(n * h * w, d).astype(np.float32)
    dists = _sq_distances(flat, codebook.entries)
    ids = dists.argmin(axis=1).astype(np.int32)
    return TokenGrid(
        indices=ids.reshape(n, h, w),
        mask=np.zeros((n, h, w), dtype=bool),
        vocab=codebook.size,
    )


def decode(grid: TokenGrid, codebook: Codebook) -> np.ndarray:
    """Tile codebook entries back into frames; masked positions are an error."""
    if grid.mask.any():
        raise ContractError(
            f"cannot decode a grid with {grid.masked_count()} masked positions"
        )
    if grid.vocab > codebook.size:
        raise ContractError(
            f"grid vocab {grid.vocab} exceeds codebook size {codebook.size}"
        )
    n, h, w = grid.shape
    patches = codebook.entries[grid.indices.reshape(-1)].reshape(n, h, w, codebook.dim)
    return unpatchify(patches, codebook.patch_h, codebook.patch_w, codebook.channel)


def reconstruction_error(frames: np.ndarray, codebook: Codebook) -> float:
    """Mean squared pixel error of the encode/decode round trip."""
    frames = _as_frames(np.asarray(frames, dtype=np.float32), codebook.channel)
    rebuilt = decode(encode(frames, codebook), codebook)
    diff = rebuilt - frames
    return float((diff * diff).mean())


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def save_tokens(grid: TokenGrid, channel: str, path: str | Path) -> None:
    """Write a token grid container (see module docstring for the layout)."""
    if channel not in _CHANNEL_TAGS:
        raise ContractError(f"unknown channel tag {channel!r}")
    n, h, w = grid.shape
    if grid.vocab > 0xFFFF:
        raise ContractError(f"vocab {grid.vocab} does not fit 16-bit token ids")
    ids = np.where(grid.mask, 0, grid.indices).astype("<u2")
    bits = np.packbits(grid.mask.reshape(-1))
    with open(path, "wb") as f:
        f.write(_TOKENS_MAGIC)
        f.write(struct.pack("<HB", _FORMAT_VERSION, _CHANNEL_TAGS[channel]))
        f.write(struct.pack("<4I", n, h, w, grid.vocab))
        f.write(ids.tobytes())
        f.write(bits.tobytes())


def load_tokens(path: str | Path) -> tuple[TokenGrid, str]:
    """Read a token grid container; returns (grid, channel)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _TOKENS_MAGIC:
            raise FormatError(f"{path}: not a token grid file")
        version, tag = struct.unpack("<HB", _read_exact(f, 3, "header"))
        if version != _FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if tag not in _TAG_CHANNELS:
            raise FormatError(f"{path}: unknown channel tag {tag}")
        n, h, w, vocab = struct.unpack("<4I", _read_exact(f, 16, "dims"))
        count = n * h * w
        ids = np.frombuffer(_read_exact(f, 2 * count, "token ids"), dtype="<u2")
        packed = np.frombuffer(_read_exact(f, (count + 7) // 8, "mask bitmap"), dtype=np.uint8)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    mask = np.unpackbits(packed, count=count).astype(bool).reshape(n, h, w)
    grid = TokenGrid(
        indices=ids.astype(np.int32).reshape(n, h, w), mask=mask, vocab=vocab
    )
    return grid, _TAG_CHANNELS[tag]


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    """Write a codebook container (see module docstring for the layout)."""
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<H", _FORMAT_VERSION))
        f.write(struct.pack("<2I", codebook.size, codebook.dim))
        f.write(
            struct.pack(
                "<BHHB",
                _CHANNEL_TAGS[codebook.channel],
                codebook.patch_h,
                codebook.patch_w,
                codebook.channels,
            )
        )
        f.write(codebook.entries.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    """Read a codebook container."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _CODEBOOK_MAGIC:
            raise FormatError(f"{path}: not a codebook file")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != _FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        m, d = struct.unpack("<2I", _read_exact(f, 8, "dims"))
        tag, patch_h, patch_w, channels = struct.unpack("<BHHB", _read_exact(f, 6, "geometry"))
        if tag not in _TAG_CHANNELS:
            raise FormatError(f"{path}: unknown channel tag {tag}")
        channel = _TAG_CHANNELS[tag]
        if channels != _CHANNELS[channel]:
            raise FormatError(f"{path}: channel count {channels} inconsistent with tag")
        entries = np.frombuffer(_read_exact(f, 4 * m * d, "entries"), dtype="<f4")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return Codebook(
        entries=entries.reshape(m, d).copy(),
        channel=channel,
        patch_h=patch_h,
        patch_w=patch_w,
    )
