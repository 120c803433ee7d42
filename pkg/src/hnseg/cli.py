"""
``hnseg`` command line: phantom, preprocess, train, crossval, infer, evaluate, describe.

Exit codes: 0 success, 1 pipeline failure, 2 usage error, 3 config error.
Failures print one JSON line ``{"error": kind, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext
from pathlib import Path

from . import __version__
from .config import PipelineConfig, arch_hash, describe_constants, dump, load, preset
from .errors import ArgumentError, ConfigError, HNSegError

log = logging.getLogger("hnseg")

EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
THREADS_ENV = "HNSEG_NUM_THREADS"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = load(args.config, preset_name=args.preset)
    else:
        cfg = preset(args.preset or "desk")
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def write_provenance(out_dir: str | os.PathLike, cfg: PipelineConfig, argv: list[str]) -> Path:
    from .autodiff import config_hash

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": "hnseg",
        "version": __version__,
        "argv": argv,
        "config_hash": config_hash(cfg.to_dict()),
        "arch_hash": arch_hash(cfg),
        "seed": cfg.seed,
        "preset": cfg.preset,
        "python": platform.python_version(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "provenance.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    dump(cfg, out / "config.json")
    return path


def thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    try:
        count = int(n)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def describe_text(cfg: PipelineConfig) -> str:
    from .segresnet import build, layer_table

    lines = ["# constants"]
    for key, value in describe_constants(cfg).items():
        lines.append(f"{key}: {json.dumps(value)}")
    lines.append("")
    lines.append("# layers")
    lines.append(f"{'name':<16} {'kind':<10} {'in':>5} {'out':>5} {'k':>2} {'s':>2} {'output shape':<22} {'params':>10}")
    rows = layer_table(cfg.network)
    for r in rows:
        shape = "x".join(str(s) for s in r["shape"])
        lines.append(
            f"{r['name']:<16} {r['kind']:<10} {r['in']:>5} {r['out']:>5} {r['kernel']:>2} {r['stride']:>2} "
            f"{shape:<22} {r['params']:>10}"
        )
    total = sum(r["params"] for r in rows)
    lines.append(f"total parameters: {total}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_phantom(args, cfg: PipelineConfig) -> int:
    from dataclasses import replace

    from .phantom import generate_corpus

    spec = cfg.phantom if args.seed is None else replace(cfg.phantom, seed=args.seed)
    if args.count < 1:
        raise ArgumentError("--count must be >= 1")
    generate_corpus(spec, args.count, args.out)
    write_provenance(args.out, cfg, sys.argv[1:])
    print(json.dumps({"cases": args.count, "out": str(args.out)}))
    return 0


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    from .preprocess import preprocess_corpus

    ids = preprocess_corpus(args.input, args.out, cfg.crop, cfg.normalization, cfg.spacing)
    write_provenance(args.out, cfg, sys.argv[1:])
    print(json.dumps({"cases": len(ids), "out": str(args.out)}))
    return 0


def _folds_for(args, cfg, pre_dir: Path):
    from .datapipe import read_folds, split_folds
    from .trainer import split_holdout

    if args.folds:
        return read_folds(args.folds)
    ids = sorted(p.name for p in pre_dir.iterdir() if (p / "sidecar.json").exists())
    pool, _ = split_holdout(ids, cfg.crossval.test_holdout, cfg.seed) if cfg.crossval.test_holdout else (ids, [])
    return split_folds(pool, cfg.crossval.folds, cfg.seed)


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .datapipe import write_folds
    from .trainer import load_cases, train_fold

    pre = Path(args.data)
    folds = _folds_for(args, cfg, pre)
    out = Path(args.out)
    write_provenance(out, cfg, sys.argv[1:])
    write_folds(folds, out / "folds.json")
    cases = load_cases(pre, sorted(c for f in folds for c in f))
    res = train_fold(cfg, folds, cases, out / f"run{args.run}" / f"fold{args.fold}", args.fold, args.run,
                     resume=args.resume)
    print(json.dumps({"best_val_dice": res.best_metric, "best_epoch": res.best_epoch, "checkpoint": res.best_path,
                      "params_hash": res.final_hash}))
    return 0


def cmd_crossval(args, cfg: PipelineConfig) -> int:
    from .phantom import generate_corpus
    from .preprocess import preprocess_corpus
    from .trainer import run_crossval

    out = Path(args.out)
    raw = Path(args.phantom_corpus or args.data)
    if args.phantom_corpus and not any(raw.glob("*/ct.nii.gz")):
        generate_corpus(cfg.phantom, args.count, raw)
    pre = out / "preprocessed"
    write_provenance(out, cfg, sys.argv[1:])
    preprocess_corpus(raw, pre, cfg.crop, cfg.normalization, cfg.spacing)
    res = run_crossval(cfg, pre, raw, out)
    print((out / "crossval.md").read_text(), end="")
    if res.submissions:
        print((out / "submissions.md").read_text(), end="")
    return 0


def cmd_infer(args, cfg: PipelineConfig) -> int:
    from dataclasses import replace

    from .inference import NetPredictor, finalize, predict_volume
    from .preprocess import load_raw_case, preprocess_case
    from .volume import write_nifti

    paths = [p for p in args.checkpoints.split(",") if p]
    if not paths:
        raise ArgumentError("--checkpoints needs at least one path")
    predictors = [NetPredictor.from_checkpoint(p) for p in paths]
    ct, pet, _ = load_raw_case(args.input)
    case = preprocess_case(ct, pet, None, cfg.crop, cfg.normalization, cfg.spacing, Path(args.input).name)
    inf = replace(cfg.inference, tta=args.tta)
    post = replace(cfg.inference.postprocess, enabled=args.postprocess)
    pads = (case.sidecar["pad_values"]["ct"], case.sidecar["pad_values"]["pet"])
    pm = predict_volume(predictors, case.network_input(), inf, case.geometry, pads)
    mask = finalize(pm, case.sidecar, ct.geometry, pet_raw=case.pet_raw, post=post)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(mask, out)
    write_provenance(out.parent, cfg, sys.argv[1:])
    print(json.dumps({"out": str(out), "models": len(paths), "tta": args.tta, "postprocess": args.postprocess}))
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    from .metrics import evaluate_dirs

    rep = evaluate_dirs(args.pred_dir, args.gt_dir)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(args.report)
    print(json.dumps({"cases": len(rep.case_ids), "gtvp": rep.per_class[1], "gtvn": rep.per_class[2],
                      "mean": rep.mean}))
    return 0


def cmd_describe(args, cfg: PipelineConfig) -> int:
    sys.stdout.write(describe_text(cfg))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=["desk", "paper"], default=None, help="configuration preset (default desk)")
    common.add_argument("--config", help="JSON config overlaid on its preset")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="hnseg", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=f"hnseg {__version__}")
    sub = p.add_subparsers(dest="verb", metavar="VERB")

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", parents=[common], help="resample, crop and normalize a corpus")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train one (fold, run) model")
    s.add_argument("--data", required=True, help="preprocessed corpus directory")
    s.add_argument("--out", required=True)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--run", type=int, default=0)
    s.add_argument("--folds", help="folds.json to use instead of a fresh split")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", parents=[common], help="train all folds and runs, write reports")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--phantom-corpus", help="raw phantom corpus (generated there if empty)")
    g.add_argument("--data", help="raw corpus directory")
    s.add_argument("--count", type=int, default=25)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("infer", parents=[common], help="predict one raw case")
    s.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    s.add_argument("--input", required=True, help="raw case directory with ct/pet NIfTI")
    s.add_argument("--out", required=True)
    s.add_argument("--tta", action="store_true")
    s.add_argument("--postprocess", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="aggregated Dice of predictions against ground truth")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("describe", parents=[common], help="print preset constants and the layer table")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_describe)
    return p


def _fail(exc: BaseException, code: int) -> int:
    kind = getattr(exc, "kind", type(exc).__name__)
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.dumps())
            return 0
        with thread_limit():
            return args.func(args, cfg)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (HNSegError, OSError) as exc:
        return _fail(exc, EXIT_FAILURE)
