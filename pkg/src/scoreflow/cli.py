"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 numerical divergence,
4 grid sweep had failing cells.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import parse_config, serialize_config
from .errors import NumericalDivergenceError, ParseError, ValidationError
from .metrics import metric_moments, metric_sliced_w2
from .runner import (
    emit_report,
    grid_search,
    GridReport,
    load_samples,
    measure_order,
    rows_to_csv,
    run_sample,
    write_samples,
)
from .training import save_model, train_loop
from .runner import _train_inline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PARTIAL = 4


def _load_config(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    out = run_sample(cfg)
    paths = write_samples(out.samples, args.out, cfg.output.formats)
    report = GridReport(rows=[out.row])
    paths += emit_report(report, args.out, formats=("csv", "json"), svg=False)
    print(rows_to_csv([out.row]), end="")
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    gmm = cfg.data.build_gmm()
    result = _train_inline(cfg, gmm)
    model = result.ema_model if cfg.train.use_ema else result.model
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_model(model, args.out)
    first = result.loss_curve[0][1]
    last = result.loss_curve[-1][1]
    print(f"trained {cfg.train.objective} for {cfg.train.steps} steps: "
          f"loss {first:.4f} -> {last:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_grid(args) -> int:
    cfg = _load_config(args.config)
    report = grid_search(cfg, max_workers=args.workers)
    paths = emit_report(report, args.out)
    for path in paths:
        print(f"wrote {path}")
    for metric, run_id in sorted(report.best.items()):
        print(f"best {metric}: {run_id}")
    if report.failures:
        for run_id, message in report.failures:
            print(f"FAILED {run_id}: {message}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_eval(args) -> int:
    a = load_samples(args.samples)
    b = load_samples(args.reference)
    sw2 = metric_sliced_w2(a, b, 64, np.random.default_rng(args.seed))
    mean_err, cov_err = metric_moments(a, b)
    print(json.dumps({"sw2": sw2, "mean_err": mean_err, "cov_err": cov_err},
                     indent=1))
    return EXIT_OK


def _cmd_order(args) -> int:
    cfg = _load_config(args.config)
    slope, errs = measure_order(
        cfg.sampler.kind, cfg.sampler.order,
        sigma_min=cfg.sampler.sigma_min, sigma_max=cfg.sampler.sigma_max,
    )
    print(f"sampler {cfg.sampler.kind} (order {cfg.sampler.order}): "
          f"slope {slope:.3f}")
    print("errors:", " ".join(f"{e:.3e}" for e in errs))
    return EXIT_OK


def _cmd_trajectory(args) -> int:
    cfg = _load_config(args.config)
    out = run_sample(cfg, record_trajectory=True)
    traj = out.trajectory
    with open(args.out, "w", encoding="utf-8") as fh:
        dim = out.samples.shape[1]
        cols = ["step", "sigma"] + [f"x{i}" for i in range(dim)]
        fh.write(",".join(cols) + "\n")
        for step, (sigma, state) in enumerate(zip(traj.sigmas, traj.states)):
            first = np.atleast_2d(state)[0]
            fields = [str(step), repr(sigma)] + [repr(v) for v in first]
            fh.write(",".join(fields) + "\n")
    print(f"wrote {args.out} ({len(traj)} records)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoreflow",
        description="Score-based diffusion sampling and training at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw samples per a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("train", help="train a denoiser model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grid", help="sweep sampler hyperparameters")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("eval", help="compare two sample files")
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("order", help="empirical convergence order study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_order)

    p = sub.add_parser("trajectory", help="record one sampling trajectory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_trajectory)

    p = sub.add_parser("show-config", help="echo the canonical config form")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_show_config)
    return parser


def _cmd_show_config(args) -> int:
    print(serialize_config(_load_config(args.config)), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
