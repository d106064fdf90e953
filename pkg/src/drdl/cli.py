"""Command-line entry point: ``drdl <subcommand> ...``.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(keys are listed by ``drdl <subcommand> --help`` and in :mod:`drdl.config`);
flags given on the command line win over file values.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .autodiff.gradcheck import NonFiniteLossError
from .autodiff.optim import ConfigError
from .config import RunConfig, build_run_config, dump_config, load_config_file
from .data import (
    AugmentConfigError,
    DatasetFormatError,
    Domain,
    EmptyDatasetError,
    joint_label_spaces,
    load_dataset,
    read_meta,
    save_split,
    write_meta,
)
from .diagnostics import check_all, check_loss
from .evaluation import REPORT_COLUMNS, cmc_svg, evaluate, report_csv
from .fileio import atomic_write_text
from .losses import LOSSES
from .model import DrdlModel, ModelConfig
from .reconduct import CameraGraph, GraphError, ReconductConfig, reconduct, stats_row, stats_table, swap_splits
from .synth import generate
from .trainer import TrainConfigError, load_model, train

log = logging.getLogger("drdl")

USER_ERRORS = (
    ConfigError,
    TrainConfigError,
    DatasetFormatError,
    EmptyDatasetError,
    AugmentConfigError,
    CheckpointError,
    GraphError,
    NonFiniteLossError,
    FileNotFoundError,
    ValueError,
)


# ----------------------------------------------------------------- helpers


def _run_config(args: argparse.Namespace, keys: list[str]) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return build_run_config(file_values, overrides)


def _add(p: argparse.ArgumentParser, flag: str, kind, help: str, dest: str | None = None) -> str:
    dest = dest or flag.lstrip("-").replace("-", "_")
    p.add_argument(flag, dest=dest, type=kind, default=None, help=help)
    return dest


def _synth_flags(p) -> list[str]:
    return [
        _add(p, "--ids", int, "identities per domain (default 32)"),
        _add(p, "--cams", int, "cameras per domain (default 3)"),
        _add(p, "--per", int, "images per (identity, camera) (default 4)"),
        _add(p, "--test-ids", int, "target test identities (default: same as --ids)"),
        _add(p, "--membership", str, "camera membership: all, one, or k:n (default all)"),
        _add(p, "--height", int, "image height (default 32)"),
        _add(p, "--width", int, "image width (default 16)"),
        _add(p, "--noise", float, "pixel noise sigma (default 0.02)"),
    ]


def _train_flags(p) -> list[str]:
    keys = [
        _add(p, "--epochs", int, "total epochs (default 60)"),
        _add(p, "--iter-pre", int, "pretraining epochs, >= 1 (default 25)"),
        _add(p, "--batch-size", int, "batch size per domain (default 16)"),
        _add(p, "--warmup", int, "content-encoder warm-up epochs (default 5)"),
        _add(p, "--lr-e1", float, "content encoder learning rate"),
        _add(p, "--weight-decay-e1", float, "content encoder weight decay"),
        _add(p, "--lr-e2", float, "style encoder learning rate"),
        _add(p, "--lr-w1", float, "identity classifier learning rate"),
        _add(p, "--lr-w2", float, "camera classifier learning rate"),
        _add(p, "--crop-padding", int, "random-crop padding in pixels (default 0)"),
        _add(p, "--flip-prob", float, "horizontal flip probability (default 0)"),
        _add(p, "--erase-prob", float, "random erasing probability (default 0)"),
        _add(p, "--eval-every", int, "evaluate on target query/gallery every N epochs (0: last only)"),
        _add(p, "--checkpoint-every", int, "write a checkpoint every N epochs (0: last only)"),
    ]
    for w in ("alpha", "beta", "lam", "tau"):
        keys.append(_add(p, f"--{w}", float, f"loss weight {w}"))
    p.add_argument("--normalize", action="store_const", const=True, default=None,
                   help="standardise each input image to zero mean and unit std")
    keys.append("normalize")
    return keys


def _common(p, out_required: bool = True) -> list[str]:
    p.add_argument("--config", default=None, help="key = value config file")
    keys = [_add(p, "--seed", int, "random seed (default 0)")]
    p.add_argument("--out", dest="out", required=out_required, default=None, help="output directory")
    keys.append("out")
    return keys


def _load_domains(source: str, target: str):
    ls = joint_label_spaces(source, target)
    src = load_dataset(source, Domain.SOURCE, "train", ls)
    tgt = load_dataset(target, Domain.TARGET, "train", ls)
    test = None
    if (Path(target) / "query").is_dir() and (Path(target) / "gallery").is_dir():
        test = (
            load_dataset(target, Domain.TARGET, "query", ls),
            load_dataset(target, Domain.TARGET, "gallery", ls),
        )
    return ls, src, tgt, test


def _evaluator(test, junk: bool):
    if test is None:
        return None
    q, g = test

    def ev(model):
        r = evaluate(model, q, g, "fused", junk=junk)
        return {"rank1": r.rank1, "rank5": r.rank5, "rank10": r.rank10, "mAP": r.mAP}

    return ev


def _write_reports(out: Path, reports, stem: str = "report") -> None:
    atomic_write_text(out / f"{stem}.csv", report_csv(reports))
    for r in reports:
        rows = io.StringIO()
        wr = csv.writer(rows, lineterminator="\n")
        wr.writerow(["rank", "match_rate"])
        wr.writerows([[k + 1, f"{v:.6f}"] for k, v in enumerate(r.cmc_curve)])
        atomic_write_text(out / f"cmc_{r.feature_source}.csv", rows.getvalue())
        atomic_write_text(out / f"cmc_{r.feature_source}.svg", cmc_svg(r.cmc_curve, label=f"CMC ({r.feature_source})"))


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _run_config(args, args.keys)
    generate(cfg.synth_config(), cfg.out)
    atomic_write_text(Path(cfg.out) / "config.txt", dump_config(cfg))
    print(f"wrote {cfg.out}/source and {cfg.out}/target")
    return 0


def cmd_reconduct(args) -> int:
    cfg = _run_config(args, args.keys)
    root = Path(args.data)
    meta = read_meta(root)
    splits = {}
    for split in ("train", "query", "gallery"):
        if (root / split).is_dir():
            splits[split] = load_dataset(root, Domain.TARGET, split)
    if "train" not in splits:
        raise EmptyDatasetError(f"{root}: no train split")
    before = stats_row(meta.get("name", root.name), splits)
    if args.swap_splits:
        if "query" not in splits or "gallery" not in splits:
            raise EmptyDatasetError("--swap-splits needs query and gallery splits")
        splits = swap_splits(splits)
    graph = CameraGraph.parse(cfg.graph, int(meta["num_cams"]))
    rc = ReconductConfig(graph, cfg.move_probability, cfg.seed)
    new_train, st = reconduct(splits["train"], rc)
    splits = {**splits, "train": new_train}
    name = meta.get("name", root.name) + "-new"
    after = stats_row(name, splits)

    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        for split, ds in splits.items():
            save_split(ds, tmp / split)
        # num_ids keeps the label-space width, so surviving pids stay valid class indices
        write_meta(tmp, {**meta, "name": name})
        csv_text, table = stats_table([before, after])
        (tmp / "stats.csv").write_text(csv_text)
        (tmp / "stats.txt").write_text(table)
        (tmp / "config.txt").write_text(dump_config(cfg))
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(table, end="")
    return 0


def _train_once(cfg: RunConfig, args, out: Path | None, **overrides):
    ls, src, tgt, test = _load_domains(args.source, args.target)
    tcfg = cfg.train_config(**overrides)
    dtype = np.float64 if getattr(args, "double", False) else np.float32
    mcfg = ModelConfig(in_channels=src.shape[0], image_shape=src.shape, seed=cfg.seed, normalize_input=cfg.normalize)
    model = DrdlModel(ls, mcfg, dtype=dtype)
    result = train(
        model,
        src,
        tgt,
        tcfg,
        evaluator=_evaluator(test, cfg.junk),
        out_dir=out,
        resume=getattr(args, "resume", None),
        stop_after=getattr(args, "stop_after", None),
    )
    return result, test


def cmd_train(args) -> int:
    cfg = _run_config(args, args.keys)
    out = Path(cfg.out)
    if args.resume and not Path(args.resume).is_file():
        raise CheckpointError(f"no such checkpoint: {args.resume}")
    _train_once(cfg, args, out)
    atomic_write_text(out / "config.txt", dump_config(cfg))
    print(f"wrote {out}/metrics.csv and checkpoints")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args, args.keys)
    model, _, _ = load_model(args.checkpoint)
    target = Path(args.data)
    ls = model.label_spaces
    q = load_dataset(target, Domain.TARGET, "query", ls)
    g = load_dataset(target, Domain.TARGET, "gallery", ls)
    features = [cfg.feature] if not args.all_features else ["fused", "gap", "gmp", "style"]
    reports = [evaluate(model, q, g, f, junk=cfg.junk) for f in features]
    out = Path(cfg.out)
    _write_reports(out, reports)
    sys.stdout.write(report_csv(reports))
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args, args.keys)
    if args.param not in ("alpha", "beta", "lam", "tau"):
        raise ConfigError("--param must be one of alpha, beta, lam, tau")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values is empty")
    out = Path(cfg.out)
    rows = []
    for v in values:
        cell = dataclasses.replace(cfg, **{args.param: v})
        cell_dir = out / f"{args.param}_{v:g}" if args.keep_runs else None
        result, test = _train_once(cell, args, cell_dir)
        if test is None:
            raise EmptyDatasetError("sweep needs target query and gallery splits")
        r = evaluate(result.model, test[0], test[1], cell.feature, junk=cell.junk)
        rows.append({"param": args.param, "value": f"{v:g}", "seed": str(cell.seed), **r.row()})
        log.info("sweep %s=%g rank1=%.4f mAP=%.4f", args.param, v, r.rank1, r.mAP)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=["param", "value", "seed", *REPORT_COLUMNS], lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    atomic_write_text(out / "sweep_rank1.svg", _sweep_svg(values, [float(r["rank1"]) for r in rows], args.param))
    sys.stdout.write(buf.getvalue())
    return 0


def _sweep_svg(xs, ys, label: str, width: int = 320, height: int = 200) -> str:
    pad = 20
    n = len(xs)
    # cells are spaced evenly in input order (grids are usually log-spaced)
    px = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    py = [height - pad - (height - 2 * pad) * y for y in ys]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    ticks = "".join(
        f'  <text x="{x:.2f}" y="{height - 4}" font-size="9" text-anchor="middle">{v:g}</text>\n'
        for x, v in zip(px, xs)
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f"  <title>rank-1 vs {label}</title>\n"
        f'  <rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#999"/>\n'
        f'  <polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts}"/>\n'
        f"{ticks}"
        "</svg>\n"
    )


def cmd_gradcheck(args) -> int:
    names = [args.loss] if args.loss else list(LOSSES)
    if args.loss and args.loss not in LOSSES:
        raise ConfigError(f"unknown loss {args.loss!r}; choose from {', '.join(LOSSES)}")
    seed = args.seed or 0
    checks = [check_loss(n, double=args.double, seed=seed) for n in names] if args.loss else check_all(args.double, seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    if failed:
        for c in failed:
            r = c.report
            print(
                f"worst coordinate for {c.loss}: {r.worst_param}{list(r.worst_index)} "
                f"analytic={r.analytic:.9e} numeric={r.numeric:.9e}",
                file=sys.stderr,
            )
        return 1
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drdl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic source/target pair")
    p.set_defaults(func=cmd_synth, keys=_common(p) + _synth_flags(p))

    p = sub.add_parser("reconduct", help="re-conduct a dataset through a camera graph")
    keys = _common(p)
    p.add_argument("--data", required=True, help="dataset root with train[/query/gallery] splits")
    keys.append(_add(p, "--graph", str, "line, ring, complete, grid:RxC, or edges like 0-1,1-2 (default line)"))
    keys.append(_add(p, "--move-probability", float, "edge retention probability (default 0.25)"))
    p.add_argument("--swap-splits", action="store_true", help="train on query+gallery, test on the old train split")
    p.set_defaults(func=cmd_reconduct, keys=keys)

    p = sub.add_parser("train", help="pretrain then run the adversarial schedule")
    keys = _common(p) + _train_flags(p)
    p.add_argument("--source", required=True, help="source dataset root")
    p.add_argument("--target", required=True, help="target dataset root")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this epoch (for resumable partial runs)")
    p.add_argument("--double", action="store_true", help="train in float64")
    p.set_defaults(func=cmd_train, keys=keys)

    p = sub.add_parser("eval", help="retrieval report for a checkpoint")
    keys = _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="target dataset root with query and gallery splits")
    keys.append(_add(p, "--feature", str, "fused (default), gap, gmp or style"))
    p.add_argument("--no-junk", dest="junk", action="store_const", const=False, default=None,
                   help="keep same-identity same-camera gallery items")
    keys.append("junk")
    p.add_argument("--all-features", action="store_true", help="report every feature source")
    p.set_defaults(func=cmd_eval, keys=keys)

    p = sub.add_parser("sweep", help="train and evaluate over a grid of one loss weight")
    keys = _common(p) + _train_flags(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--param", required=True, help="alpha, beta, lam or tau")
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 0,0.01,0.1")
    p.add_argument("--keep-runs", action="store_true", help="keep per-cell metrics and checkpoints")
    p.add_argument("--double", action="store_true", help="train in float64")
    p.set_defaults(func=cmd_sweep, keys=keys)

    p = sub.add_parser("gradcheck", help="finite-difference check of the six losses")
    p.add_argument("--double", action="store_true", help="check in float64 (tolerance 1e-6)")
    p.add_argument("--loss", default=None, help="check only this loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck, keys=[])
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print(f"drdl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
