"""Training objectives, the optimization loop, and trained-model plumbing.

Four objectives share one loop: denoising regression under preconditioning,
noise prediction, velocity prediction in the trigonometric convention, and
linear-interpolation flow matching.  Velocity and flow objectives fold the
data scale out (train on x0 / sigma_data) and restore it at sampling time,
which keeps their conversions exactly invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalDivergenceError
from .nn import NULL_LABEL, AdamOptimizer, MlpDenoiser, ema_update
from .oracle import IsotropicGMM, gmm_sample
from .parameterization import CoordinateFrame, Preconditioner, to_denoiser
from .schedules import LossWeighting, TrainNoiseSampler

OBJECTIVES = ("edm_denoise", "epsilon", "v_pred", "rectified_flow")

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs, including its RNG seed."""

    objective: str = "edm_denoise"
    hidden: tuple = (64, 64)
    train_noise: TrainNoiseSampler = field(default_factory=TrainNoiseSampler)
    weighting: LossWeighting = field(default_factory=LossWeighting)
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_beta: float = 0.999
    cfg_dropout: float = 0.0
    steps: int = 5000
    batch: int = 128
    seed: int = 0
    sigma_data: float = 0.5
    conditioning: str = "none"  # none | adaln | channel_concat
    sigma_obs: float = 0.5
    label_dim: int = 8
    log_every: int = 50

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise DomainError("cfg_dropout must lie in [0, 1]")
        if self.lr <= 0:
            raise DomainError("lr must be positive")


def reference_training_config(**overrides) -> TrainConfig:
    """The published large-scale recipe: AdamW 5e-4 / decay 0.01 / EMA 0.9999."""
    base = TrainConfig(lr=5e-4, weight_decay=0.01, ema_beta=0.9999)
    return replace(base, **overrides)


def drop_condition(condition, p: float, rng: np.random.Generator):
    """Replace a condition by the null token with probability p."""
    if not 0.0 <= p <= 1.0:
        raise DomainError("dropout probability must lie in [0, 1]")
    if p > 0.0 and rng.random() < p:
        return None
    return condition


def _drop_labels(labels, p: float, rng: np.random.Generator):
    labels = np.array(labels, dtype=np.intp, copy=True)
    if p > 0.0:
        labels[rng.random(labels.shape) < p] = NULL_LABEL
    return labels


def _loss_and_grads(objective: str, model: MlpDenoiser, x0, train_noise,
                    weighting, rng, sigma_data: float, labels=None, obs=None,
                    want_grads: bool = True):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    batch, dim = x0.shape
    denom = batch * dim
    noise = rng.standard_normal((batch, dim))
    pc = Preconditioner(sigma_data=sigma_data)

    if objective == "edm_denoise":
        sigma = train_noise.sample(rng, batch)
        x = x0 + sigma[:, None] * noise
        raw, cache = model.forward(pc.c_in(sigma)[:, None] * x, pc.c_noise(sigma),
                                   labels=labels, obs=obs, want_cache=True)
        denoised = pc.c_skip(sigma)[:, None] * x + pc.c_out(sigma)[:, None] * raw
        resid = denoised - x0
        w = weighting.weight(sigma)[:, None]
        loss = float(np.sum(w * resid**2) / denom)
        dout = (2.0 / denom) * w * resid * pc.c_out(sigma)[:, None]
    elif objective == "epsilon":
        sigma = train_noise.sample(rng, batch)
        x = x0 + sigma[:, None] * noise
        raw, cache = model.forward(pc.c_in(sigma)[:, None] * x, pc.c_noise(sigma),
                                   labels=labels, obs=obs, want_cache=True)
        resid = raw - noise
        loss = float(np.sum(resid**2) / denom)
        dout = (2.0 / denom) * resid
    elif objective == "v_pred":
        x0u = x0 / sigma_data
        sigma_u = train_noise.sample(rng, batch) / sigma_data
        root = np.sqrt(1.0 + sigma_u**2)
        cos_phi = (1.0 / root)[:, None]
        sin_phi = (sigma_u / root)[:, None]
        x_bar = cos_phi * x0u + sin_phi * noise
        target = cos_phi * noise - sin_phi * x0u
        raw, cache = model.forward(x_bar, np.log(sigma_u) / 4.0,
                                   labels=labels, obs=obs, want_cache=True)
        resid = raw - target
        loss = float(np.sum(resid**2) / denom)
        dout = (2.0 / denom) * resid
    else:  # rectified_flow
        x0u = x0 / sigma_data
        t = np.clip(rng.uniform(0.0, 1.0, batch), 1e-7, 1.0 - 1e-7)
        x_t = (1.0 - t)[:, None] * x0u + t[:, None] * noise
        target = noise - x0u
        sigma_u = t / (1.0 - t)
        raw, cache = model.forward(x_t, np.log(sigma_u) / 4.0,
                                   labels=labels, obs=obs, want_cache=True)
        resid = raw - target
        loss = float(np.sum(resid**2) / denom)
        dout = (2.0 / denom) * resid

    if not want_grads:
        return loss, None
    return loss, model.backward(cache, dout)


def compute_loss(objective: str, model: MlpDenoiser, x0,
                 train_noise: TrainNoiseSampler, weighting: LossWeighting,
                 rng: np.random.Generator, sigma_data: float = 0.5,
                 labels=None, obs=None) -> float:
    """Scalar training loss for a batch (no gradient computation)."""
    if objective not in OBJECTIVES:
        raise DomainError(f"unknown objective {objective!r}")
    loss, _ = _loss_and_grads(objective, model, x0, train_noise, weighting,
                              rng, sigma_data, labels=labels, obs=obs,
                              want_grads=False)
    return loss


class TrainedDenoiser:
    """A backbone plus the bookkeeping to expose it as D(x, sigma).

    Conversions route through the shared parameterization layer, so a model
    trained under any objective plugs into the same samplers.
    """

    _RF_FRAME = CoordinateFrame("RF")

    def __init__(self, mlp: MlpDenoiser, sigma_data: float, objective: str):
        if objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {objective!r}")
        self.mlp = mlp
        self.sigma_data = float(sigma_data)
        self.objective = objective
        self._pc = Preconditioner(sigma_data=self.sigma_data)

    def denoise(self, x, sigma: float, label=None, obs=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma = float(sigma)
        if sigma <= 0:
            raise DomainError("denoise requires sigma > 0")
        labels = None
        if self.mlp.conditioning == "adaln":
            fill = NULL_LABEL if label is None else int(label)
            labels = np.full(x.shape[0], fill, dtype=np.intp)
        if self.objective == "edm_denoise":
            raw = self.mlp.forward(self._pc.c_in(sigma) * x, self._pc.c_noise(sigma),
                                   labels=labels, obs=obs)
            return self._pc.c_skip(sigma) * x + self._pc.c_out(sigma) * raw
        if self.objective == "epsilon":
            raw = self.mlp.forward(self._pc.c_in(sigma) * x, self._pc.c_noise(sigma),
                                   labels=labels, obs=obs)
            return to_denoiser("epsilon", raw, x, sigma)
        xu = x / self.sigma_data
        sigma_u = sigma / self.sigma_data
        if self.objective == "v_pred":
            x_bar = xu / np.sqrt(1.0 + sigma_u**2)
            raw = self.mlp.forward(x_bar, np.log(sigma_u) / 4.0,
                                   labels=labels, obs=obs)
            return self.sigma_data * to_denoiser("velocity", raw, xu, sigma_u)
        # rectified_flow
        t = sigma_u / (1.0 + sigma_u)
        x_rf = (1.0 - t) * xu
        raw = self.mlp.forward(x_rf, np.log(sigma_u) / 4.0, labels=labels, obs=obs)
        return self.sigma_data * to_denoiser("flow", raw, xu, sigma_u,
                                             frame=self._RF_FRAME, t=t)

    def with_params(self, params: dict) -> "TrainedDenoiser":
        """Same architecture and conversion, different weights (e.g. EMA)."""
        mlp = self.mlp.spawn_like()
        for name in mlp.params:
            mlp.params[name] = params[name].copy()
        return TrainedDenoiser(mlp, self.sigma_data, self.objective)


@dataclass
class TrainResult:
    model: TrainedDenoiser
    ema_model: TrainedDenoiser
    loss_curve: list  # (step, loss) pairs


def train_loop(config: TrainConfig, data: IsotropicGMM) -> TrainResult:
    """Run the full optimization; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    mlp = MlpDenoiser(
        dim=data.dim,
        hidden=config.hidden,
        conditioning=config.conditioning,
        n_labels=data.n_components if config.conditioning == "adaln" else 0,
        label_dim=config.label_dim,
        obs_dim=data.dim if config.conditioning == "channel_concat" else 0,
        rng=rng,
    )
    opt = AdamOptimizer(lr=config.lr, weight_decay=config.weight_decay)
    ema_params = {name: p.copy() for name, p in mlp.params.items()}
    curve = []
    for step in range(config.steps):
        x0, comp = gmm_sample(data, rng, config.batch, return_labels=True)
        labels, obs = None, None
        if config.conditioning == "adaln":
            labels = _drop_labels(comp, config.cfg_dropout, rng)
        elif config.conditioning == "channel_concat":
            obs = x0 + config.sigma_obs * rng.standard_normal(x0.shape)
        loss, grads = _loss_and_grads(
            config.objective, mlp, x0, config.train_noise, config.weighting,
            rng, config.sigma_data, labels=labels, obs=obs,
        )
        if not np.isfinite(loss):
            raise NumericalDivergenceError(
                f"training loss became non-finite at step {step}", step=step
            )
        opt.step(mlp.params, grads)
        ema_update(ema_params, mlp.params, config.ema_beta)
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append((step, loss))
    model = TrainedDenoiser(mlp, config.sigma_data, config.objective)
    return TrainResult(model=model, ema_model=model.with_params(ema_params),
                       loss_curve=curve)


def dump_model(model: TrainedDenoiser) -> str:
    """Self-describing text form of a trained model (exact round-trip)."""
    mlp = model.mlp
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "dim": mlp.dim,
        "hidden": list(mlp.hidden),
        "activation": "silu",
        "conditioning": mlp.conditioning,
        "n_labels": mlp.n_labels,
        "label_dim": mlp.label_dim,
        "obs_dim": mlp.obs_dim,
        "n_freqs": mlp.n_freqs,
        "sigma_data": model.sigma_data,
        "objective": model.objective,
        "params": {
            name: {"shape": list(p.shape), "data": p.ravel(order="C").tolist()}
            for name, p in mlp.params.items()
        },
    }
    return json.dumps(doc, indent=1)


def parse_model(text: str) -> TrainedDenoiser:
    doc = json.loads(text)
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise DomainError(f"unsupported model schema {doc.get('schema_version')!r}")
    mlp = MlpDenoiser(
        dim=doc["dim"],
        hidden=tuple(doc["hidden"]),
        conditioning=doc["conditioning"],
        n_labels=doc["n_labels"],
        label_dim=doc["label_dim"] or 8,
        obs_dim=doc["obs_dim"],
        n_freqs=doc["n_freqs"],
        rng=np.random.default_rng(0),
    )
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if name not in mlp.params or mlp.params[name].shape != arr.shape:
            raise DomainError(f"unexpected parameter {name!r} in model document")
        mlp.params[name] = arr
    return TrainedDenoiser(mlp, doc["sigma_data"], doc["objective"])


def save_model(model: TrainedDenoiser, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_model(model))


def load_model(path) -> TrainedDenoiser:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh.read())
