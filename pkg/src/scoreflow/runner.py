"""Experiment execution: single runs, grid sweeps, order studies, reports.

Every run is a pure function of (config, seed): the model, step grid,
initial states, and metric projections all derive their randomness from
seed sequences spawned deterministically, so reruns and reshuffled grid
execution reproduce byte-identical reports (wall time aside).
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, apply_override
from .errors import DomainError, ValidationError
from .metrics import (
    metric_mode_mass_error,
    metric_moments,
    metric_sliced_w2,
)
from .oracle import (
    IsotropicGMM,
    conditional_restrict,
    gmm_denoise,
    gmm_sample,
    gmm_score,
    sample_perturbed,
)
from .schedules import StepGrid, build_grid
from .solvers import (
    DenoiserHandle,
    Trajectory,
    guided_denoiser,
    score_from_denoiser,
    sde_euler_maruyama,
    solve,
    warm_start_init,
)
from .parameterization import from_denoiser, to_denoiser
from .training import (
    TrainConfig,
    TrainedDenoiser,
    load_model,
    train_loop,
)
from .schedules import LossWeighting, TrainNoiseSampler

MAX_WORKERS_ENV = "SCOREFLOW_MAX_CELLS"

CSV_COLUMNS = (
    "run_id", "sampler", "grid", "steps", "nfe", "order", "guidance_scale",
    "seed", "sw2", "mean_err", "cov_err", "mode_mass_err", "wall_ms",
)

REPORT_SCHEMA_VERSION = 1


@dataclass
class MetricsRow:
    run_id: str
    sampler: str
    grid: str
    steps: int
    nfe: int
    order: int
    guidance_scale: float
    seed: int
    sw2: float
    mean_err: float
    cov_err: float
    mode_mass_err: float
    wall_ms: float

    def as_csv(self) -> list:
        return [getattr(self, col) for col in CSV_COLUMNS]


@dataclass
class RunOutput:
    samples: np.ndarray
    row: MetricsRow
    trajectory: Trajectory | None = None


def _train_noise_from_cfg(cfg: RunConfig) -> TrainNoiseSampler:
    tn = cfg.train_noise
    return TrainNoiseSampler(kind=tn.kind, p_mean=tn.p_mean, p_std=tn.p_std,
                             sigma_min=tn.sigma_min, sigma_max=tn.sigma_max,
                             slope=tn.slope, offset=tn.offset)


def _wrapped_oracle(gmm: IsotropicGMM, parameterization: str) -> DenoiserHandle:
    """Oracle denoiser, optionally routed through a raw-output conversion.

    Non-denoiser parameterizations exercise the cross-compatibility layer:
    the exact denoiser is re-expressed as (say) a noise predictor, then
    converted back at evaluation time.
    """
    if parameterization == "denoiser":
        return DenoiserHandle(lambda x, s: gmm_denoise(gmm, x, s), name="oracle")
    if parameterization == "flow":
        from .parameterization import CoordinateFrame

        frame = CoordinateFrame("RF")

        def denoise_flow(x, sigma):
            t = frame.time_from_sigma(sigma)
            exact = gmm_denoise(gmm, x, sigma)
            raw = from_denoiser("flow", exact, x, sigma, frame=frame, t=t)
            return to_denoiser("flow", raw, x, sigma, frame=frame, t=t)

        return DenoiserHandle(denoise_flow, name="oracle-flow")

    def denoise(x, sigma, kind=parameterization):
        exact = gmm_denoise(gmm, x, sigma)
        raw = from_denoiser(kind, exact, x, sigma)
        return to_denoiser(kind, raw, x, sigma)

    return DenoiserHandle(denoise, name=f"oracle-{parameterization}")


def build_model_handle(cfg: RunConfig, gmm: IsotropicGMM) -> DenoiserHandle:
    """Denoiser handle per the model section (oracle, file, or inline train)."""
    if cfg.model.kind == "oracle":
        base = _wrapped_oracle(gmm, cfg.model.parameterization)
    else:
        if cfg.model.kind == "mlp":
            trained = load_model(cfg.model.path)
        else:  # train inline
            trained = _train_inline(cfg, gmm).model
        label = cfg.guidance.target if cfg.guidance.mode == "cfg" else None
        base = DenoiserHandle(
            lambda x, s, t=trained, lab=label: t.denoise(x, s, label=lab),
            name=f"mlp-{trained.objective}",
        )
    if cfg.guidance.mode == "none":
        return base
    spec = cfg.guidance.to_spec()
    if cfg.guidance.mode == "cfg":
        if cfg.model.kind == "oracle":
            cond = conditional_restrict(gmm, [cfg.guidance.target])
            cond_handle = DenoiserHandle(lambda x, s: gmm_denoise(cond, x, s))
            uncond_handle = base
            return guided_denoiser(cond_handle, spec, uncond_handle)
        trained = load_model(cfg.model.path) if cfg.model.kind == "mlp" else None
        if trained is None:
            raise ValidationError("cfg guidance with inline training is not "
                                  "wired; train first, then sample",
                                  key="guidance.mode")
        uncond_handle = DenoiserHandle(
            lambda x, s, t=trained: t.denoise(x, s, label=None)
        )
        return guided_denoiser(base, spec, uncond_handle)
    # classifier guidance: analytic log-posterior gradient of the data mixture
    cond = conditional_restrict(gmm, [cfg.guidance.target])

    def classifier_grad(x, sigma):
        return gmm_score(cond, x, sigma) - gmm_score(gmm, x, sigma)

    return guided_denoiser(base, spec, classifier_grad)


def _train_inline(cfg: RunConfig, gmm: IsotropicGMM):
    t = cfg.train
    train_cfg = TrainConfig(
        objective=t.objective, hidden=t.hidden,
        train_noise=_train_noise_from_cfg(cfg),
        weighting=LossWeighting(kind=cfg.run.weighting,
                                sigma_data=cfg.model.sigma_data),
        lr=t.lr, weight_decay=t.weight_decay, ema_beta=t.ema_beta,
        cfg_dropout=t.cfg_dropout, steps=t.steps, batch=t.batch,
        seed=cfg.run.seed, sigma_data=cfg.model.sigma_data,
        conditioning=t.conditioning, sigma_obs=t.sigma_obs,
    )
    return train_loop(train_cfg, gmm)


def initial_state(cfg: RunConfig, gmm: IsotropicGMM, n: int,
                  rng: np.random.Generator, observation=None) -> np.ndarray:
    kind = cfg.init.kind
    sigma_max = cfg.sampler.sigma_max
    if kind == "standard":
        return sigma_max * rng.standard_normal((n, gmm.dim))
    if kind == "exact_prior":
        return sample_perturbed(gmm, sigma_max, rng, n)
    if observation is None:
        raise DomainError("warm_start initialization needs an observation")
    return warm_start_init(observation, cfg.init.sigma_start, rng)


def build_sampler_grid(cfg: RunConfig) -> StepGrid:
    s = cfg.sampler
    sigma_max = s.sigma_max
    if cfg.init.kind == "warm_start":
        if cfg.init.sigma_start <= s.sigma_min:
            raise ValidationError("sigma_start must exceed sampler.sigma_min",
                                  key="init.sigma_start")
        sigma_max = min(sigma_max, cfg.init.sigma_start)
    return build_grid(s.grid, s.steps, s.sigma_min, sigma_max, rho=s.rho)


def run_sample(cfg: RunConfig, record_trajectory: bool = False) -> RunOutput:
    """One full sampling run: model, grid, solve, metrics."""
    started = time.perf_counter()
    gmm = cfg.data.build_gmm()
    seeds = np.random.SeedSequence(cfg.run.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[1])
    ref_rng = np.random.default_rng(seeds[2])
    metric_rng = np.random.default_rng(seeds[3])

    handle = build_model_handle(cfg, gmm)
    grid = build_sampler_grid(cfg)
    n = cfg.run.samples

    observation = None
    if cfg.init.kind == "warm_start":
        clean = gmm_sample(gmm, init_rng, n)
        observation = clean + cfg.init.sigma_start * init_rng.standard_normal(
            (n, gmm.dim))
    x_t = initial_state(cfg, gmm, n, init_rng, observation)

    trajectory = Trajectory() if record_trajectory else None
    samples = solve(cfg.sampler.kind, handle, grid, x_t,
                    order=cfg.sampler.order, rng=init_rng,
                    trajectory=trajectory)

    reference_gmm = gmm
    if cfg.guidance.mode in ("cfg", "classifier") and cfg.model.kind == "oracle":
        reference_gmm = conditional_restrict(gmm, [cfg.guidance.target])
    reference = gmm_sample(reference_gmm, ref_rng, n)
    sw2 = metric_sliced_w2(samples, reference, 64, metric_rng)
    mean_err, cov_err = metric_moments(samples, reference)
    mode_err = metric_mode_mass_error(samples, reference_gmm)
    wall_ms = (time.perf_counter() - started) * 1e3

    row = MetricsRow(
        run_id=run_id_for(cfg), sampler=cfg.sampler.kind, grid=cfg.sampler.grid,
        steps=cfg.sampler.steps, nfe=handle.nfe, order=cfg.sampler.order,
        guidance_scale=cfg.guidance.scale if cfg.guidance.mode != "none" else 0.0,
        seed=cfg.run.seed, sw2=sw2, mean_err=mean_err, cov_err=cov_err,
        mode_mass_err=mode_err, wall_ms=wall_ms,
    )
    return RunOutput(samples=samples, row=row, trajectory=trajectory)


def run_id_for(cfg: RunConfig, cell_index: int | None = None) -> str:
    parts = [cfg.sampler.kind, cfg.sampler.grid, f"n{cfg.sampler.steps}",
             f"o{cfg.sampler.order}", f"s{cfg.run.seed}"]
    if cfg.guidance.mode != "none":
        parts.append(f"g{cfg.guidance.scale:g}")
    if cell_index is not None:
        parts.insert(0, f"cell{cell_index:04d}")
    return "-".join(parts)


def expand_grid(cfg: RunConfig) -> list[RunConfig]:
    """Cartesian product of the grid lists over the base config."""
    cells = [cfg]
    for key, values in cfg.grid_lists:
        cells = [apply_override(c, key, v) for c in cells for v in values]
        if len(cells) > cfg.grid_max_cells:
            raise ValidationError(
                f"grid expands to more than {cfg.grid_max_cells} cells",
                key="grid.max_cells",
            )
    return cells


@dataclass
class GridReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (run_id, message)
    best: dict = field(default_factory=dict)  # metric -> run_id

    @property
    def all_failed(self) -> bool:
        return bool(self.failures) and not self.rows


def grid_search(cfg: RunConfig, max_workers: int | None = None) -> GridReport:
    """Run every grid cell, aggregate rows sorted by run id, pick winners."""
    cells = expand_grid(cfg)
    if max_workers is None:
        max_workers = int(os.environ.get(MAX_WORKERS_ENV, "1"))
    max_workers = max(1, max_workers)

    def one(indexed_cell):
        index, cell = indexed_cell
        out = run_sample(cell)
        out.row.run_id = run_id_for(cell, cell_index=index)
        return out.row

    report = GridReport()
    indexed = list(enumerate(cells))
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {pool.submit(one, item): item for item in indexed}
        for future in concurrent.futures.as_completed(futures):
            index, cell = futures[future]
            try:
                report.rows.append(future.result())
            except Exception as exc:  # record, keep sweeping
                report.failures.append((run_id_for(cell, cell_index=index),
                                        f"{type(exc).__name__}: {exc}"))
    report.rows.sort(key=lambda row: row.run_id)
    report.failures.sort()
    for metric in ("sw2", "mean_err", "cov_err", "mode_mass_err"):
        if report.rows:
            best = min(report.rows, key=lambda row: getattr(row, metric))
            report.best[metric] = best.run_id
    return report


def measure_order(solver_kind: str, order: int, ns=(8, 16, 32, 64, 128, 256),
                  mu: float = 0.7, sigma_d: float = 1.0,
                  sigma_min: float = 2e-3, sigma_max: float = 80.0,
                  x_t: float = 55.0) -> tuple[float, list]:
    """Least-squares slope of log endpoint error vs log N.

    The reference endpoint is the closed-form single-Gaussian solution
    x(0) = mu + (x_T - mu) sigma_d / sqrt(sigma_d^2 + sigma_max^2).
    """
    if len(ns) < 4:
        raise DomainError("need at least 4 grid sizes for a slope fit")
    gmm_single = IsotropicGMM(dim=1, weights=np.array([1.0]),
                              means=np.array([[mu]]),
                              stds=np.array([sigma_d]))
    exact = mu + (x_t - mu) * sigma_d / math.sqrt(sigma_d**2 + sigma_max**2)
    errs = []
    for n in ns:
        grid = build_grid("polynomial", n, sigma_min, sigma_max)
        handle = DenoiserHandle(lambda x, s: gmm_denoise(gmm_single, x, s))
        end = solve(solver_kind, handle, grid, np.array([x_t]), order=order,
                    rng=np.random.default_rng(0))
        errs.append(float(abs(end[0] - exact)))
    if min(errs) < 1e-13:
        raise DomainError("errors at numerical floor; slope fit degenerate")
    slope = -float(np.polyfit(np.log(ns), np.log(errs), 1)[0])
    return slope, errs


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv())
    return buf.getvalue()


def report_to_json(report: GridReport) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "rows": [dict(zip(CSV_COLUMNS, row.as_csv())) for row in report.rows],
        "failures": [{"run_id": rid, "error": msg}
                     for rid, msg in report.failures],
        "best": report.best,
    }
    return json.dumps(doc, indent=1)


def render_metric_svg(rows, metric: str = "sw2", width: int = 640,
                      height: int = 480) -> str:
    """Log-log polyline chart of metric vs NFE, one polyline per sampler."""
    by_sampler: dict[str, list] = {}
    for row in rows:
        by_sampler.setdefault(row.sampler, []).append(
            (row.nfe, getattr(row, metric))
        )
    points = [(n, v) for series in by_sampler.values() for n, v in series
              if n > 0 and v > 0]
    if not points:
        raise DomainError("no positive data points to plot")
    log = math.log10
    xs = [log(n) for n, _ in points]
    ys = [log(v) for _, v in points]
    x_lo, x_hi = min(xs), max(xs) + 1e-9
    y_lo, y_hi = min(ys), max(ys) + 1e-9
    pad = 50

    def sx(x):
        return pad + (log(x) - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (log(y) - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    palette = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        f'stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">NFE (log)</text>',
        f'<text x="14" y="{height // 2}" font-size="12" '
        f'transform="rotate(-90 14 {height // 2})">{metric} (log)</text>',
    ]
    for i, (sampler, series) in enumerate(sorted(by_sampler.items())):
        series = sorted((n, v) for n, v in series if n > 0 and v > 0)
        coords = " ".join(f"{sx(n):.1f},{sy(v):.1f}" for n, v in series)
        color = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{20 + 14 * i}" '
                     f'font-size="11" fill="{color}">{sampler}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(report: GridReport, out_dir: str, formats=("csv", "json"),
                svg: bool = True) -> list[str]:
    """Write the aggregate report files; returns the paths written."""
    if not report.rows and not report.failures:
        raise DomainError("nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(rows_to_csv(report.rows))
        written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report_to_json(report))
        written.append(path)
    if svg and report.rows:
        path = os.path.join(out_dir, "metric_vs_nfe.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_metric_svg(report.rows))
        written.append(path)
    return written


def write_samples(samples: np.ndarray, out_dir: str, formats=("csv",),
                  stem: str = "samples") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, f"{stem}.csv")
        np.savetxt(path, samples, delimiter=",",
                   header=",".join(f"x{i}" for i in range(samples.shape[1])),
                   comments="")
        written.append(path)
    if "npy" in formats:
        path = os.path.join(out_dir, f"{stem}.npy")
        np.save(path, samples)
        written.append(path)
    return written


def load_samples(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path)
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
