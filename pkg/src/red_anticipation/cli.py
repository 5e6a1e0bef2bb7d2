"""Command-line entry point: gen-data, train, eval, anticipate, grad-check.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import DataError, SyntheticSpec, _write_atomic, gen_synthetic, load_dataset, load_features, write_dataset
from .evaluation import (Predictions, UndefinedMetricError, anticipation_delay,
                         metrics_from_predictions, predict_horizons)
from .gradcheck import run_grad_checks
from .model import Hyper
from .numerics import NumericError
from .training import ConfigError, load_config, log_csv, train_stage1, train_stage2

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("red_anticipation")


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return parse


def _horizon_list(s):
    try:
        hs = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad horizon list {s!r}") from None
    if not hs or min(hs) < 1:
        raise argparse.ArgumentTypeError("horizons must be positive chunk counts")
    return hs


def _resolve_seed(flag_seed, fallback):
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("RED_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"RED_SEED must be an integer, got {env!r}") from None
    return fallback


def _require_file(path, what):
    if not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(d=args.dim, c=args.classes, videos=args.videos, chunks=args.chunks,
                         action_rate=args.action_rate, separation=args.separation,
                         noise=args.noise, smoothing=args.smoothing,
                         seed=_resolve_seed(args.seed, 7),
                         min_action=args.min_action, max_action=args.max_action)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        write_dataset(tmp, gen_synthetic(spec), spec)
        if out.exists():
            shutil.rmtree(out) if out.is_dir() else out.unlink()
        os.rename(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(out / "manifest.txt")
    return EXIT_OK


# ---------------------------------------------------------------- train

_ARCH = {"red": "encdec", "ed": "encdec", "efc": "efc", "fc": "fc"}


def cmd_train(args) -> int:
    _require_file(args.config, "config file")
    _require_file(args.manifest, "manifest")
    config = load_config(args.config)
    config = config.replace(seed=_resolve_seed(args.seed, config.seed))
    if args.arch == "ed":
        config = config.replace(use_reinforce=False)
    elif args.arch in ("efc", "fc"):
        config = config.replace(use_reinforce=False)
    arch = _ARCH[args.arch]
    need_labels = args.stage in ("2", "both")
    videos = load_dataset(args.manifest, config.hyper.c, require_labels=need_labels)
    for v in videos:
        if v.features.d != config.hyper.d:
            raise DataError(f"{v.video_id}: feature dim {v.features.d} != config d={config.hyper.d}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if args.stage in ("1", "both"):
        model, curve = train_stage1(videos, config, arch=arch)
        checkpoint.save(out / "stage1.ckpt", model)
        _write_atomic(out / "stage1_log.csv", log_csv(curve))
    if need_labels:
        if model is None:
            if not args.init:
                raise UsageError("--stage 2 needs --init <stage-1 checkpoint>")
            _require_file(args.init, "initial checkpoint")
            model = checkpoint.load(args.init)
            if model.arch != arch:
                raise DataError(f"{args.init}: checkpoint arch {model.arch} does not match --arch {args.arch}")
        model, curve = train_stage2(model, videos, config)
        checkpoint.save(out / "stage2.ckpt", model)
        _write_atomic(out / "stage2_log.csv", log_csv(curve))
    _write_atomic(out / "config.txt", config.to_text())
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    _require_file(args.manifest, "manifest")
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    videos = load_dataset(args.manifest, require_labels=True)
    if args.checkpoint:
        _require_file(args.checkpoint, "checkpoint")
        model = checkpoint.load(args.checkpoint)
        horizons = args.horizons or list(model.horizons)
        bad = [h for h in horizons if h not in model.horizons]
        if bad:
            raise UsageError(f"horizon(s) {bad} not available; model anticipates {list(model.horizons)}")
        preds = predict_horizons(model, videos, horizons)
        secs = model.hyper.chunk_seconds
        if args.dump:
            _write_atomic(args.dump, preds.to_csv())
    else:
        _require_file(args.predictions, "prediction dump")
        preds = Predictions.from_csv(Path(args.predictions).read_text())
        if args.horizons:
            bad = [h for h in args.horizons if h not in preds.horizons]
            if bad:
                raise UsageError(f"horizon(s) {bad} not in the prediction dump")
            preds.horizons = tuple(args.horizons)
        secs = videos[0].features.chunk_seconds
    report = metrics_from_predictions(preds, videos, secs, args.global_w)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        _write_atomic(args.out, text)
    for h in report.horizons:
        log.info("horizon %d: accuracy %.4f mAP %.4f mcAP %.4f",
                 h, report.accuracy[h], report.mean_ap[h], report.mean_cap[h])
    if args.checkpoint and model.arch == "encdec":
        try:
            log.info("anticipation delay %.4f chunks", anticipation_delay(model, videos))
        except UndefinedMetricError:
            pass
    return EXIT_OK


# ---------------------------------------------------------------- anticipate

def cmd_anticipate(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.features, "feature file")
    model = checkpoint.load(args.checkpoint)
    feats = load_features(args.features)
    t = args.at
    if t < model.t_enc:
        raise DataError(f"--at {t}: need {model.t_enc} chunks of history")
    if t > len(feats):
        raise DataError(f"--at {t}: video has only {len(feats)} chunks")
    if feats.d != model.hyper.d:
        raise DataError(f"feature dim {feats.d} != model d={model.hyper.d}")
    fw = model.anticipate(feats.chunks[None, t - model.t_enc:t])
    for k, h in enumerate(model.horizons):
        probs = fw.probs[0, k]
        rec = {
            "step": k + 1,
            "chunk": t + h - 1,
            "horizon_seconds": h * model.hyper.chunk_seconds,
            "probs": [float(p) for p in probs],
            "predicted": int(np.argmax(probs)),
            "feature_norm": float(np.linalg.norm(fw.vhat[0, k])),
        }
        print(json.dumps(rec))
    return EXIT_OK


# ---------------------------------------------------------------- grad-check

def cmd_grad_check(args) -> int:
    hyper = Hyper(t_enc=args.t_enc, t_dec=args.t_dec, d=args.d, h=args.h, c=args.classes)
    reports = run_grad_checks(hyper, batch=args.batch, seed=_resolve_seed(args.seed, 0),
                              eps=args.eps, corrupt=args.corrupt)
    ok = True
    for r in reports:
        status = "PASS" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{status} {r.name} max_rel_err={r.max_relative_error:.3e} "
              f"index={r.worst_parameter_index} analytic={r.analytic_value:.9e} "
              f"numeric={r.numeric_value:.9e} n={r.n_checked}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="red-anticipation", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--jobs", type=_positive(int), default=1,
                   help="worker cap (work currently runs in one process)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=_positive(int), default=8)
    g.add_argument("--chunks", type=_positive(int), default=400)
    g.add_argument("--classes", type=_positive(int), default=3)
    g.add_argument("--dim", type=_positive(int), default=16)
    g.add_argument("--action-rate", type=float, default=0.3)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--smoothing", type=float, default=0.8)
    g.add_argument("--min-action", type=_positive(int), default=8)
    g.add_argument("--max-action", type=_positive(int), default=24)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--arch", choices=tuple(_ARCH), default="red")
    t.add_argument("--init", help="stage-1 checkpoint for --stage 2")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP/cAP per class and horizon")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="re-score a prediction dump instead of a model")
    e.add_argument("--horizons", type=_horizon_list)
    e.add_argument("--out", help="also write the report CSV here")
    e.add_argument("--dump", help="write the prediction dump CSV here")
    e.add_argument("--global-w", action="store_true", help="one calibration ratio for all classes")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("anticipate", help="anticipate from one position of a feature file")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--features", required=True)
    a.add_argument("--at", type=int, required=True, help="anchor chunk t; history is [t-T_enc, t)")
    a.set_defaults(func=cmd_anticipate)

    c = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    c.add_argument("--d", type=_positive(int), default=8)
    c.add_argument("--h", type=_positive(int), default=12)
    c.add_argument("--t-enc", type=_positive(int), default=4)
    c.add_argument("--t-dec", type=_positive(int), default=3)
    c.add_argument("--classes", type=_positive(int), default=3)
    c.add_argument("--batch", type=_positive(int), default=3)
    c.add_argument("--eps", type=_positive(float), default=1e-5)
    c.add_argument("--tol", type=_positive(float), default=1e-5)
    c.add_argument("--seed", type=int)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
