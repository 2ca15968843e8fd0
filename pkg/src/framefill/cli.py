"""Command-line interface: gen-data, fit-tokenizer, train, interpolate,
eval, schedule, and bench subcommands.

Every command derives all randomness from one master seed (--seed or the
config file's `seed`), validates inputs through the module contracts, writes
only its declared outputs, and exits 1 with a one-line diagnostic on any
contract violation. Identical inputs and seeds produce identical bytes.

FRAMEFILL_THREADS (default 1) caps internal parallelism; it is exported to
the BLAS layers below, which must happen before numpy first loads.
"""

import os


def _pin_blas_threads():
    n = os.environ.get("FRAMEFILL_THREADS", "1") or "1"
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(var, n)


_pin_blas_threads()

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_run_config, load_run_config
from .data import load_clip, make_dataset, save_clip
from .decoding import decode_trace_csv, interpolate, keep_count_sequence
from .errors import ContractError, FramefillError
from .metrics import metrics_report
from .model import (
    SCORE_LABEL,
    init_parameters,
    score_multiplies,
    spatial_window_attention,
    tube_window_attention,
)
from .rng import derive_rng, derive_seed
from .tensor import MultiplyCounter, count_multiplies, tensor
from .tokenizer import fit_video_codebooks, load_codebook, save_codebook
from .training import trace_to_csv, train


def _load_config(args) -> RunConfig:
    seed = getattr(args, "seed", None)
    if getattr(args, "config", None):
        return load_run_config(args.config, seed_override=seed)
    return default_run_config(seed if seed is not None else 0)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(data_dir: str) -> list[tuple[np.ndarray, np.ndarray]]:
    root = Path(data_dir)
    clips = sorted(root.glob("clip_*.mvid"))
    if not clips:
        raise ContractError(f"no clip_*.mvid files in {root}")
    dataset = []
    for clip_path in clips:
        struct_path = root / clip_path.name.replace("clip_", "structure_", 1)
        if not struct_path.exists():
            raise ContractError(f"missing structure file {struct_path}")
        clip = load_clip(clip_path)
        structs = load_clip(struct_path)[..., 0]
        dataset.append((clip, structs))
    return dataset


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    dataset = make_dataset(
        derive_seed(cfg.seed, "data"),
        d.n_clips,
        n_frames=d.n_frames,
        height=d.height,
        width=d.width,
        min_shapes=d.min_shapes,
        max_shapes=d.max_shapes,
        structure_threshold=d.structure_threshold,
    )
    out = _out_dir(args.out)
    for i, (clip, structs) in enumerate(dataset):
        save_clip(clip, out / f"clip_{i:03d}.mvid")
        save_clip(structs, out / f"structure_{i:03d}.mvid")
    print(f"wrote {len(dataset)} clips to {out}")
    return 0


def cmd_fit_tokenizer(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    color, structure = fit_video_codebooks(
        dataset,
        cfg.tokenizer.color_size,
        cfg.tokenizer.structure_size,
        patch_h=cfg.tokenizer.patch_h,
        patch_w=cfg.tokenizer.patch_w,
        seed=derive_seed(cfg.seed, "tokenizer"),
        max_iters=cfg.tokenizer.max_iters,
    )
    out = _out_dir(args.out)
    save_codebook(color, out / "color.mcbk")
    save_codebook(structure, out / "structure.mcbk")
    print(
        f"fit color codebook ({color.size} entries) and structure codebook "
        f"({structure.size} entries) in {out}"
    )
    return 0


def _load_codebooks(directory: str):
    root = Path(directory)
    return load_codebook(root / "color.mcbk"), load_codebook(root / "structure.mcbk")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    color, structure = _load_codebooks(args.codebooks or args.data)
    params, trace = train(dataset, color, structure, cfg.model, cfg.train)
    out = _out_dir(args.out)
    save_checkpoint(out / "checkpoint.mckp", cfg.model, params)
    (out / "loss.csv").write_text(trace_to_csv(trace))
    print(
        f"trained {cfg.train.steps} steps; final loss {trace[-1].loss:.4f}; "
        f"checkpoint in {out}"
    )
    return 0


def cmd_interpolate(args) -> int:
    cfg = _load_config(args)
    decode_cfg = cfg.decode
    if args.K is not None:
        decode_cfg = replace(decode_cfg, steps=args.K)
    if args.t is not None:
        decode_cfg = replace(decode_cfg, temperature=args.t)
    model_config, params = load_checkpoint(args.checkpoint)
    color, structure = _load_codebooks(args.codebooks)
    anchors_clip = load_clip(args.anchors)
    if anchors_clip.shape[0] != len(decode_cfg.anchors):
        raise ContractError(
            f"{args.anchors} holds {anchors_clip.shape[0]} frames but the "
            f"decode config names {len(decode_cfg.anchors)} anchors"
        )
    structures = load_clip(args.structures)[..., 0]
    anchor_frames = {
        a: anchors_clip[i] for i, a in enumerate(decode_cfg.anchors)
    }
    clip, trace = interpolate(
        params,
        model_config,
        anchor_frames,
        structures,
        color,
        structure,
        decode_cfg,
        zero_structure=args.zero_structure,
    )
    save_clip(clip, args.out)
    trace_path = args.trace or (args.out + ".trace.csv")
    Path(trace_path).write_text(decode_trace_csv(trace))
    print(f"wrote {clip.shape[0]} frames to {args.out}")
    return 0


def _clip_paths(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        found = sorted(p.glob("*.mvid"))
        if not found:
            raise ContractError(f"no *.mvid files in {p}")
        return found
    return [p]


def cmd_eval(args) -> int:
    generated = _clip_paths(args.generated)
    reference = _clip_paths(args.reference)
    if len(generated) != len(reference):
        raise ContractError(
            f"{len(generated)} generated clips vs {len(reference)} references"
        )
    pairs = [(load_clip(g), load_clip(r)) for g, r in zip(generated, reference)]
    text = metrics_report(pairs)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote metrics for {len(pairs)} clips to {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_schedule(args) -> int:
    print("step,masked_after")
    for k, count in enumerate(keep_count_sequence(args.K, args.total, args.schedule)):
        print(f"{k},{count}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    mc = cfg.model
    params = init_parameters(mc, derive_rng(cfg.seed, "init"))
    rng = derive_rng(cfg.seed, "bench")
    ih, iw = mc.inner_grid
    x = tensor(rng.normal(0.0, 1.0, (mc.n_frames, ih, iw, mc.embed_dim)))

    def run_spatial():
        for i in range(mc.blocks):
            spatial_window_attention(x, params, f"block{i}.spatial", mc.heads)

    def run_tube():
        for i in range(mc.blocks):
            tube_window_attention(
                x, params, f"block{i}.tube", mc.heads, mc.window_h, mc.window_w
            )

    def run_global():
        # a tube window covering the whole grid attends over every token
        for i in range(mc.blocks):
            tube_window_attention(x, params, f"block{i}.tube", mc.heads, ih, iw)

    print("kind,analytic_score_multiplies,measured_score_multiplies,wall_seconds")
    for kind, fn in (("spatial", run_spatial), ("tube", run_tube), ("global", run_global)):
        analytic = mc.blocks * score_multiplies(kind, mc)
        counter = MultiplyCounter()
        start = time.perf_counter()
        with count_multiplies(counter):
            fn()
        elapsed = time.perf_counter() - start
        print(f"{kind},{analytic},{counter[SCORE_LABEL]},{elapsed:.6f}")
    tube = score_multiplies("tube", mc)
    glob = score_multiplies("global", mc)
    print(
        f"tube_to_global_ratio,{tube / glob:.8f}"
        f"  # = (window_h*window_w)/(grid_h*grid_w) post-conv"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="framefill",
        description="Structure-aware frame interpolation on token grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        if out_required:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("gen-data", help="render synthetic clips + structure maps")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-tokenizer", help="fit color/structure codebooks")
    common(p)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.set_defaults(func=cmd_fit_tokenizer)

    p = sub.add_parser("train", help="train the masked token model")
    common(p)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument(
        "--codebooks", help="directory with color.mcbk/structure.mcbk (default: --data)"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpolate", help="fill frames between anchor frames")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint.mckp path")
    p.add_argument(
        "--anchors",
        required=True,
        help="clip of anchor frames, stacked in decode.anchors order",
    )
    p.add_argument("--structures", required=True, help="structure map clip")
    p.add_argument("--codebooks", required=True, help="codebook directory")
    p.add_argument("-K", type=int, help="decode steps (default from config)")
    p.add_argument("-t", type=float, help="decode temperature (default from config)")
    p.add_argument(
        "--zero-structure",
        action="store_true",
        help="suppress structure conditioning at inference",
    )
    p.add_argument("--trace", help="decode trace CSV path (default: OUT.trace.csv)")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="score generated clips against references")
    p.add_argument("--generated", required=True, help="clip file or directory")
    p.add_argument("--reference", required=True, help="clip file or directory")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="print the per-step masked-count table")
    p.add_argument("-K", type=int, default=32, help="decode steps")
    p.add_argument("--total", type=int, default=192, help="initially masked positions")
    p.add_argument("--schedule", default="cosine", choices=("cosine", "linear"))
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("bench", help="window vs global attention cost")
    common(p, out_required=False)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FramefillError as e:
        print(f"framefill: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
