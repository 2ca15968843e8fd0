"""Flat key=value run configuration.

One plain-text file pins an entire run: data generation, tokenizer fitting,
model geometry, training, and decoding. Keys are `section.field` (plus the
bare `seed`); unknown keys, duplicates, and malformed values are rejected at
parse time, and every value lands in its module's config dataclass so the
module invariants run immediately. Training and decoding seeds are derived
from the single master seed, never shared.

Example::

    seed = 7
    data.n_clips = 20
    model.blocks = 4
    train.steps = 2000
    decode.anchors = 0,7
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .decoding import DecodeConfig
from .errors import ContractError
from .model import ModelConfig
from .rng import derive_seed
from .training import TrainConfig

__all__ = [
    "DataParams",
    "TokenizerParams",
    "RunConfig",
    "parse_run_config",
    "load_run_config",
    "default_run_config",
]


@dataclass(frozen=True)
class DataParams:
    """Synthetic-dataset knobs (clip count and the clip sampler's bounds)."""

    n_clips: int = 20
    n_frames: int = 8
    height: int = 32
    width: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    structure_threshold: float = 0.0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ContractError(f"data.n_clips must be >= 1, got {self.n_clips}")
        if self.n_frames < 1:
            raise ContractError(f"data.n_frames must be >= 1, got {self.n_frames}")
        if self.height < 1 or self.width < 1:
            raise ContractError("data.height and data.width must be >= 1")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ContractError("need 1 <= data.min_shapes <= data.max_shapes")
        if not 0.0 <= self.structure_threshold <= 1.0:
            raise ContractError("data.structure_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class TokenizerParams:
    color_size: int = 64
    structure_size: int = 32
    patch_h: int = 4
    patch_w: int = 4
    max_iters: int = 50

    def __post_init__(self):
        if self.color_size < 1 or self.structure_size < 1:
            raise ContractError("tokenizer codebook sizes must be >= 1")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ContractError("tokenizer patch dims must be >= 1")
        if self.max_iters < 1:
            raise ContractError("tokenizer.max_iters must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataParams
    tokenizer: TokenizerParams
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig


_SECTIONS = {
    "data": DataParams,
    "tokenizer": TokenizerParams,
    "model": ModelConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
}

# seeds are derived from the master seed, and anchors default from the model
_EXCLUDED_KEYS = {"train.seed", "decode.seed"}


def _known_keys() -> list[str]:
    keys = ["seed"]
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key not in _EXCLUDED_KEYS:
                keys.append(key)
    return keys


def _parse_value(key: str, declared_type: str, raw: str):
    """Convert by the dataclass field's declared type, strictly."""
    try:
        if "tuple" in declared_type:  # decode.anchors = 0,7
            return tuple(int(part) for part in raw.split(",") if part.strip() != "")
        if "None" in declared_type:  # train.structure_dropout = none | 0.2
            return None if raw.lower() == "none" else float(raw)
        if declared_type == "int":
            return int(raw)
        if declared_type == "float":
            return float(raw)
        if declared_type == "str":
            return raw
    except ValueError:
        raise ContractError(f"{key}: cannot parse value {raw!r}") from None
    raise ContractError(f"{key}: unsupported value type {declared_type!r}")


def parse_run_config(text: str, seed_override: int | None = None) -> RunConfig:
    """Parse key=value lines; '#' comments and blank lines are ignored."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in values:
            raise ContractError(f"line {lineno}: duplicate key {key!r}")
        if key == "seed":
            values[key] = _parse_value(key, "int", raw)
            continue
        if "." not in key:
            raise ContractError(
                f"line {lineno}: unknown key {key!r} (expected section.field)"
            )
        section, field_name = key.split(".", 1)
        cls = _SECTIONS.get(section)
        field = None
        if cls is not None and key not in _EXCLUDED_KEYS:
            field = next((f for f in fields(cls) if f.name == field_name), None)
        if field is None:
            raise ContractError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, str(field.type), raw)

    seed = values.pop("seed", 0)
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int):
        raise ContractError(f"seed must be an integer, got {seed!r}")

    def section_kwargs(section: str) -> dict:
        prefix = section + "."
        return {
            key[len(prefix):]: value
            for key, value in values.items()
            if key.startswith(prefix)
        }

    data = DataParams(**section_kwargs("data"))
    tokenizer = TokenizerParams(**section_kwargs("tokenizer"))
    model = ModelConfig(**section_kwargs("model"))
    train_kwargs = section_kwargs("train")
    train = TrainConfig(seed=derive_seed(seed, "train"), **train_kwargs)
    decode_kwargs = section_kwargs("decode")
    decode_kwargs.setdefault("anchors", (0, model.n_frames - 1))
    decode = DecodeConfig(seed=derive_seed(seed, "decode"), **decode_kwargs)
    return RunConfig(
        seed=seed,
        data=data,
        tokenizer=tokenizer,
        model=model,
        train=train,
        decode=decode,
    )


def load_run_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    return parse_run_config(Path(path).read_text(), seed_override)


def default_run_config(seed: int = 0) -> RunConfig:
    return parse_run_config("", seed_override=seed)
