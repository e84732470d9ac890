"""Command line: ``xmt generate | train | eval | sweep-alpha``.

Set ``XMT_LOG`` to ``quiet``, ``info`` or ``debug`` for verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .data import generate_synthetic, load_dataset, normalize, save_dataset, split
from .experiment import (
    MODES,
    atomic_dir,
    load_config,
    load_norm,
    parse_mode,
    run_experiment,
    save_norm,
)
from .model import load_checkpoint, save_checkpoint
from .retrieval import evaluate

log = logging.getLogger("xmt")

_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("XMT_LOG", "quiet").lower()
    if level not in _LEVELS:
        raise ValueError(f"XMT_LOG must be one of {', '.join(_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(parse_mode(args.mode))
    return cfg


def cmd_generate(args) -> None:
    cfg = _config(args)
    if cfg.uses_files:
        raise ValueError("generate needs a synthetic spec, not data files")
    src, tgt = generate_synthetic(cfg.spec)
    parts = split(tgt, cfg.split, cfg.seed)
    with atomic_dir(args.out) as tmp:
        save_dataset(src, tmp / "src.tsv")
        for name, part in zip(("tgt-train", "tgt-test", "tgt-val"), parts):
            save_dataset(part, tmp / f"{name}.tsv")
        manifest = [f"spec.{k} = {v}" for k, v in asdict(cfg.spec).items() if v is not None]
        manifest += [f"split = {','.join(map(repr, cfg.split))}",
                     "files = src.tsv,tgt-train.tsv,tgt-test.tsv,tgt-val.tsv"]
        (tmp / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    result = run_experiment(cfg)
    with atomic_dir(args.out) as tmp:
        (tmp / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        save_checkpoint(result.model, tmp / "model.ckpt")
        save_norm(result.norm, tmp / "norm.tsv")
        (tmp / "training_log.jsonl").write_text(result.log.to_jsonl(), encoding="utf-8")
        (tmp / "report.txt").write_text(result.report.to_text(), encoding="utf-8")
        (tmp / "per_query.tsv").write_text(result.report.per_query_table(), encoding="utf-8")
    print(result.report.to_text(), end="")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if data.dims != model.target.dims:
        raise ValueError(f"dataset dims (image, text) = {data.dims} but checkpoint expects {model.target.dims}")
    norm_path = Path(args.norm) if args.norm else Path(args.checkpoint).with_name("norm.tsv")
    if norm_path.exists():
        data, _ = normalize(data, load_norm(norm_path))
    else:
        log.warning("no normalization file at %s; evaluating raw features", norm_path)
    print(evaluate(model, data).to_text(args.direction), end="")


def cmd_sweep_alpha(args) -> None:
    cfg = _config(args).with_mode("Full")
    try:
        alphas = [float(a) for a in args.alphas.split(",")]
    except ValueError:
        raise ValueError(f"--alphas must be comma-separated numbers, got {args.alphas!r}") from None
    for a in alphas:
        if not 0 < a <= 1:
            raise ValueError(f"alpha {a} outside (0, 1]")
    rows = []
    for a in alphas:
        rows.append((a, run_experiment(cfg.with_alpha(a)).report.map_average))
    table = "alpha\tmap_average\n" + "".join(f"{a!r}\t{m!r}\n" for a, m in rows)
    with atomic_dir(args.out) as tmp:
        (tmp / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (tmp / "sweep.tsv").write_text(table, encoding="utf-8")
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmt", description="Cross-media knowledge transfer experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic source/target benchmark as TSV files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one mode and evaluate on the target test split")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a saved checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--norm", help="normalization stats (default: norm.tsv beside the checkpoint)")
    e.add_argument("--direction", default="both", choices=("both", "i2t", "t2i"))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-alpha", help="train mode Full once per alpha and tabulate MAP")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--alphas", required=True, help="comma-separated values in (0, 1]")
    s.set_defaults(func=cmd_sweep_alpha)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"xmt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
