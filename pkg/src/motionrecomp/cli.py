"""Command-line entry point: ``motionrecomp <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data or checkpoint error,
4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (
    config_hash,
    describe_keys,
    dump_config,
    load_config,
    merge,
    model_spec,
    sampler_config,
    train_config,
)
from .errors import CorruptFileError, InvalidInputError, TrainingDiverged
from .model import load_checkpoint

log = logging.getLogger("motionrecomp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _prepare_out(path: str, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise UsageError(f"output directory {out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: dict, seed, started: str, outputs: list[str]) -> None:
    text = dump_config(cfg)
    (out / "config.yaml").write_text(text)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_hash": config_hash(text),
        "seed": seed,
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": sorted(set(outputs + ["config.yaml"])),
    }
    tmp = out / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "run_manifest.json")


def _overrides(args, mapping: dict[str, tuple[str, str]]) -> dict:
    """Flag values (when given) as a config override mapping."""
    over: dict[str, dict] = {}
    for attr, (sec, key) in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            over.setdefault(sec, {})[key] = val
    return over


def _resolve_config(args, mapping) -> dict:
    cfg = load_config(getattr(args, "config", None))
    return merge(cfg, _overrides(args, mapping), "command line")


def _load_data(directory: str):
    from .storage import load_dataset, read_manifest

    if not Path(directory).is_dir():
        raise CorruptFileError(f"data directory not found: {directory}")
    return load_dataset(directory), read_manifest(directory)


def _checkpoint_config(ckpt, cfg: dict, explicit_config: bool) -> dict:
    """Settings stored in the checkpoint fill in when no config file is given."""
    if explicit_config:
        return cfg
    if "config" in ckpt.meta:
        return merge(cfg, ckpt.meta["config"], "checkpoint")
    stored = {}
    if "sampler" in ckpt.meta:
        stored["sampler"] = {k: v for k, v in ckpt.meta["sampler"].items()}
    if "train" in ckpt.meta:
        stored["train"] = dict(ckpt.meta["train"])
    return merge(cfg, stored, "checkpoint")


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> list[str]:
    from .imaging import build_se2_dataset, load_base_images, mnist_digits
    from .storage import write_dataset

    cfg = _resolve_config(args, {"seed": ("data", "seed"), "count": ("data", "count")})
    d = cfg["data"]
    if d["count"] is None or int(d["count"]) < 1:
        raise UsageError("--count must be >= 1")
    out = _prepare_out(args.out, args.force)
    if d["base_images"] == "mnist":
        bases = mnist_digits(d["base_count"], canvas=d["canvas"], offset=d["base_offset"])
    else:
        bases = load_base_images(d["base_images"], canvas=d["canvas"])
    rng = np.random.default_rng(d["seed"])
    items = build_se2_dataset(bases, int(d["count"]), rng, d["num_frames"], d["max_translation"], d["rotate"])
    manifest = write_dataset(out, items, seed=d["seed"], extra={"kind": "synthetic-se2"})
    args._cfg, args._seed = cfg, d["seed"]
    print(f"wrote {manifest['sequence_count']} sequences to {out}")
    return ["manifest.json"] + [e["file"] for e in manifest["sequences"]]


def cmd_ingest(args) -> list[str]:
    from .ingestion import FrameSource, load_sequence
    from .storage import write_dataset

    out = _prepare_out(args.out, args.force)
    items = []
    for root in args.frames:
        src = FrameSource(root, args.pattern, args.stride,
                          tuple(args.crop) if args.crop else None,
                          tuple(args.resize) if args.resize else None)
        items.append((load_sequence(src), None))
    manifest = write_dataset(out, items, extra={"kind": "video"})
    args._cfg, args._seed = load_config(None), None
    print(f"ingested {manifest['sequence_count']} sequences into {out}")
    return ["manifest.json"] + [e["file"] for e in manifest["sequences"]]


def _cuts_for(sequences, manifest, cfg):
    from .ingestion import DEFAULT_CUT_THRESHOLD, detect_cuts

    threshold = cfg["data"]["cut_threshold"]
    if threshold is None and manifest.get("kind") == "video":
        threshold = DEFAULT_CUT_THRESHOLD
    if threshold is None:
        return None
    return [detect_cuts(s, threshold) for s in sequences]


def cmd_train(args) -> list[str]:
    from .training import train

    cfg = _resolve_config(args, {"epochs": ("train", "epochs"), "lr": ("train", "lr"),
                                 "seed": ("train", "seed")})
    resume = load_checkpoint(args.resume) if args.resume else None
    out = _prepare_out(args.out, args.force, allow_existing=resume is not None)
    items, manifest = _load_data(args.data)
    sequences = [s for s, _ in items]
    spec = model_spec(cfg)
    if resume is not None and resume.spec != spec:
        spec = resume.spec
        log.warning("using the model spec stored in %s", args.resume)
    result = train(sequences, train_config(cfg), spec, sampler_config(cfg), out_dir=out, resume=resume,
                   cuts=_cuts_for(sequences, manifest, cfg), meta={"data": str(args.data), "config": cfg},
                   on_epoch=lambda r: print(f"epoch {r['epoch']}: loss {r['loss']:.4f} "
                                            f"val_gap {r.get('val_gap', float('nan')):.4f}"))
    from .model import save_checkpoint

    save_checkpoint(result.state, out / "final.ckpt")
    args._cfg, args._seed = cfg, cfg["train"]["seed"]
    return ["final.ckpt", "last.ckpt", "metrics.jsonl"]


def _eval_setup(args, mapping):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, {})
    cfg = _checkpoint_config(ckpt, cfg, args.config is not None)
    cfg = merge(cfg, _overrides(args, mapping), "command line")
    model = ckpt.build_model()
    items, manifest = _load_data(args.data)
    limit = cfg["eval"]["max_sequences"]
    if limit:
        items = items[: int(limit)]
    out = _prepare_out(args.out, args.force)
    args._cfg, args._seed = cfg, cfg["eval"]["seed"]
    return ckpt, cfg, model, items, manifest, out


def cmd_eval(args) -> list[str]:
    from .evaluation import group_error

    ckpt, cfg, model, items, manifest, out = _eval_setup(
        args, {"n_tuples": ("eval", "n_tuples"), "seed": ("eval", "seed")})
    sequences = [s for s, _ in items]
    report = group_error(model, sequences, int(cfg["eval"]["n_tuples"]), np.random.default_rng(cfg["eval"]["seed"]),
                         sampler_config(cfg), train_config(cfg), _cuts_for(sequences, manifest, cfg))
    data = report.to_dict()
    (out / "group_error.json").write_text(json.dumps(data, indent=2))
    print(json.dumps({k: data[k] for k in ("equiv_error", "ineq_error", "chance_baseline", "ratio", "verdict")}))
    return ["group_error.json"]


def cmd_nn(args) -> list[str]:
    from .evaluation import make_probes, nn_complete, summarize_nn, write_nn_rows

    ckpt, cfg, model, items, manifest, out = _eval_setup(args, {
        "skip": ("eval", "skip"), "seed": ("eval", "seed"),
        "probes_per_sequence": ("eval", "probes_per_sequence"),
        "out_per_sequence": ("eval", "out_per_sequence")})
    e = cfg["eval"]
    sequences = [s for s, _ in items]
    rng = np.random.default_rng(e["seed"])
    probes = make_probes(sequences, int(e["skip"]), rng, int(e["probes_per_sequence"]))
    results = nn_complete(model, sequences, probes, rng, int(e["out_per_sequence"]))
    summary = summarize_nn(results)
    summary["skip"] = int(e["skip"])
    (out / "nn_summary.json").write_text(json.dumps(summary, indent=2))
    write_nn_rows(results, out / "nn_probes.csv")
    print(json.dumps(summary))
    return ["nn_summary.json", "nn_probes.csv"]


def cmd_saliency(args) -> list[str]:
    from .evaluation import SPATIAL, TEMPORAL, saliency, write_saliency

    ckpt, cfg, model, items, manifest, out = _eval_setup(args, {})
    if not 0 <= args.sequence < len(items):
        raise UsageError(f"--sequence must be in [0, {len(items) - 1}]")
    seq = items[args.sequence][0]
    frames = np.asarray(seq.frames[: args.frames] if args.frames else seq.frames)
    sources = [SPATIAL, TEMPORAL] if args.source == "both" else [args.source]
    stems = []
    for src in sources:
        stems += write_saliency(saliency(model, frames, src), out, prefix=f"seq{args.sequence}")
    print(f"wrote {len(stems)} saliency maps to {out}")
    return [f"{s}{ext}" for s in stems for ext in (".f32", ".png")] + [f"seq{args.sequence}_index.json"]


def cmd_embed(args) -> list[str]:
    from .evaluation import export_embeddings

    ckpt, cfg, model, items, manifest, out = _eval_setup(args, {"positions": ("eval", "positions")})
    count = export_embeddings(model, items, out / "embeddings.csv", cfg["eval"]["positions"])
    print(f"wrote {count} embeddings to {out / 'embeddings.csv'}")
    return ["embeddings.csv"]


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="motionrecomp",
        description="Learn image-motion embeddings by recomposing sequences.",
        epilog=describe_keys() + "\n\nPrecedence: command-line flag > config file > default.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=False):
        sp.add_argument("--config", required=need_config, help="YAML run configuration")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    g = sub.add_parser("generate", help="synthesize an SE(2) moving-digit dataset")
    common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_generate)

    ing = sub.add_parser("ingest", help="pack frame directories into a dataset")
    common(ing)
    ing.add_argument("--frames", nargs="+", required=True, help="one directory of frames per sequence")
    ing.add_argument("--pattern", default=r"(\d+)\.(?:png|jpe?g)$", help="regex; group 1 is the frame number")
    ing.add_argument("--stride", type=int, default=1)
    ing.add_argument("--crop", type=int, nargs=4, metavar=("X", "Y", "W", "H"))
    ing.add_argument("--resize", type=int, nargs=2, metavar=("W", "H"), default=[224, 224])
    ing.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="train an embedder")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def evalp(name, help_, func):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True, help="test dataset directory")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(func=func)
        return sp

    e = evalp("eval", "group-property embedding error", cmd_eval)
    e.add_argument("--n-tuples", dest="n_tuples", type=int)
    n = evalp("nn", "nearest-neighbor sequence completion", cmd_nn)
    n.add_argument("--skip", type=int)
    n.add_argument("--probes-per-sequence", dest="probes_per_sequence", type=int)
    n.add_argument("--out-per-sequence", dest="out_per_sequence", type=int)
    s = evalp("saliency", "spatial/temporal gradient saliency maps", cmd_saliency)
    s.add_argument("--sequence", type=int, default=0, help="index of the sequence in the dataset")
    s.add_argument("--frames", type=int, default=5, help="use the first N frames (0 = all)")
    s.add_argument("--source", choices=["spatial", "temporal", "both"], default="both")
    m = evalp("embed", "export sequence embeddings to CSV", cmd_embed)
    m.add_argument("--positions", type=int, nargs="+", help="frame positions to embed")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif args.threads:
        torch.set_num_threads(args.threads)

    started = _now()
    try:
        outputs = args.func(args)
        _write_manifest(Path(args.out), args.command, args._cfg, args._seed, started, outputs)
    except (UsageError, InvalidInputError) as exc:
        print(f"motionrecomp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptFileError, FileNotFoundError) as exc:
        print(f"motionrecomp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        where = f" (diagnostic checkpoint: {exc.checkpoint_path})" if exc.checkpoint_path else ""
        print(f"motionrecomp {args.command}: diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
