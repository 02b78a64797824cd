"""Flat text run configuration: one `section.key = value` per line.

The format is deliberately small: scalars, quoted or bare strings, and
bracketed lists.  `data.component` may repeat (one mixture component per
line) and `grid.<key>` lines attach sweep lists to any other key.  Unknown
keys are rejected with their line number; nothing is ever silently clamped
or ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ParseError, ValidationError
from .nn import CONDITIONING_MODES
from .oracle import IsotropicGMM
from .parameterization import FRAME_KINDS, GuidanceSpec
from .schedules import GRID_KINDS, TRAIN_NOISE_KINDS, WEIGHTING_KINDS
from .solvers import SOLVER_KINDS
from .training import OBJECTIVES


@dataclass(frozen=True)
class DataSpec:
    kind: str = "gmm"
    dim: int = 2
    components: tuple = ()  # rows of (weight, mean..., std)

    def build_gmm(self) -> IsotropicGMM:
        weights, means, stds = [], [], []
        for row in self.components:
            weights.append(row[0])
            means.append(row[1:-1])
            stds.append(row[-1])
        return IsotropicGMM(
            dim=self.dim,
            weights=np.array(weights),
            means=np.array(means),
            stds=np.array(stds),
        )


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "oracle"  # oracle | mlp | train
    path: str = ""
    parameterization: str = "denoiser"
    sigma_data: float = 0.5


@dataclass(frozen=True)
class TrainSpec:
    objective: str = "edm_denoise"
    steps: int = 5000
    batch: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_beta: float = 0.999
    cfg_dropout: float = 0.0
    hidden: tuple = (64, 64)
    conditioning: str = "none"
    sigma_obs: float = 0.5
    use_ema: bool = True


@dataclass(frozen=True)
class TrainNoiseSpec:
    kind: str = "log_normal"
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 2e-3
    sigma_max: float = 80.0
    slope: float = 2.0
    offset: float = 0.0


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "dpmpp"
    grid: str = "polynomial"
    steps: int = 32
    order: int = 3
    sigma_min: float = 2e-3
    sigma_max: float = 80.0
    rho: float = 7.0


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "none"
    scale: float = 1.0
    sigma_lo: float = 0.0
    sigma_hi: float = math.inf
    target: int = 0

    def to_spec(self) -> GuidanceSpec:
        return GuidanceSpec(mode=self.mode, scale=self.scale,
                            sigma_lo=self.sigma_lo, sigma_hi=self.sigma_hi,
                            target=self.target)


@dataclass(frozen=True)
class InitSpec:
    kind: str = "standard"  # standard | exact_prior | warm_start
    sigma_start: float = 0.5


@dataclass(frozen=True)
class RunSpec:
    seed: int = 0
    samples: int = 4096
    weighting: str = "edm"


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    formats: tuple = ("csv",)


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    train_noise: TrainNoiseSpec = field(default_factory=TrainNoiseSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    init: InitSpec = field(default_factory=InitSpec)
    run: RunSpec = field(default_factory=RunSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    grid_lists: tuple = ()  # ((dotted key, (values...)), ...)
    grid_max_cells: int = 512


_SECTIONS = {
    "data": DataSpec, "model": ModelSpec, "train": TrainSpec,
    "train_noise": TrainNoiseSpec, "sampler": SamplerSpec,
    "guidance": GuidanceConfig, "init": InitSpec, "run": RunSpec,
    "output": OutputSpec,
}

_FIELD_ALIASES = {("data", "component"): "components"}

_ENUMS = {
    ("data", "kind"): ("gmm",),
    ("model", "kind"): ("oracle", "mlp", "train"),
    ("model", "parameterization"): ("denoiser", "epsilon", "score", "velocity", "flow"),
    ("train", "objective"): OBJECTIVES,
    ("train", "conditioning"): CONDITIONING_MODES,
    ("train_noise", "kind"): TRAIN_NOISE_KINDS,
    ("sampler", "kind"): SOLVER_KINDS,
    ("sampler", "grid"): GRID_KINDS,
    ("guidance", "mode"): ("none", "cfg", "classifier"),
    ("init", "kind"): ("standard", "exact_prior", "warm_start"),
    ("run", "weighting"): WEIGHTING_KINDS,
    ("output", "formats"): ("csv", "npy"),
}


def _parse_scalar(token: str):
    token = token.strip()
    if not token:
        raise ValueError("empty value")
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    lowered = token.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("inf", "+inf"):
        return math.inf
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("["):
        if not raw.endswith("]"):
            raise ValueError("unterminated list")
        inner = raw[1:-1].strip()
        if not inner:
            return ()
        return tuple(_parse_scalar(tok) for tok in inner.split(","))
    return _parse_scalar(raw)


def _coerce(section: str, key: str, value, line: int):
    cls = _SECTIONS[section]
    attr = _FIELD_ALIASES.get((section, key), key)
    spec_fields = {f.name: f for f in fields(cls)}
    if attr not in spec_fields:
        raise ValidationError("unknown key", key=f"{section}.{key}", line=line)
    enum = _ENUMS.get((section, key))
    if enum is not None and not isinstance(value, tuple):
        if value not in enum:
            raise ValidationError(
                f"must be one of {sorted(enum)}, got {value!r}",
                key=f"{section}.{key}", line=line,
            )
    default = getattr(cls(), attr)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError("expected true/false", key=f"{section}.{key}",
                                  line=line)
        return attr, value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value == math.inf:
            raise ValidationError("expected an integer", key=f"{section}.{key}",
                                  line=line)
        if not isinstance(value, int):
            raise ValidationError("expected an integer", key=f"{section}.{key}",
                                  line=line)
        return attr, value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValidationError("expected a number", key=f"{section}.{key}",
                                  line=line)
        return attr, float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError("expected a string", key=f"{section}.{key}",
                                  line=line)
        return attr, value
    if isinstance(default, tuple):
        if not isinstance(value, tuple):
            value = (value,)
        if enum is not None:
            for item in value:
                if item not in enum:
                    raise ValidationError(
                        f"must be one of {sorted(enum)}, got {item!r}",
                        key=f"{section}.{key}", line=line,
                    )
        return attr, value
    raise ValidationError("unsupported field type", key=f"{section}.{key}",
                          line=line)


def parse_config(text: str) -> RunConfig:
    """Parse and validate one run configuration document."""
    staged: dict[str, dict] = {name: {} for name in _SECTIONS}
    components: list[tuple] = []
    grid_lists: list[tuple] = []
    grid_max_cells = RunConfig().grid_max_cells
    seen: set[str] = set()

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'section.key = value'", line=lineno)
        key_part, value_part = line.split("=", 1)
        dotted = key_part.strip()
        try:
            value = _parse_value(value_part)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None

        if dotted == "grid.max_cells":
            if not isinstance(value, int) or value < 1:
                raise ValidationError("expected a positive integer",
                                      key=dotted, line=lineno)
            grid_max_cells = value
            continue
        if dotted.startswith("grid."):
            target = dotted[len("grid."):]
            sec, _, key = target.partition(".")
            if sec not in _SECTIONS:
                raise ValidationError("unknown key", key=dotted, line=lineno)
            if not isinstance(value, tuple) or not value:
                raise ValidationError("grid values must be a non-empty list",
                                      key=dotted, line=lineno)
            for item in value:
                _coerce(sec, key, item, lineno)
            grid_lists.append((target, value))
            continue

        sec, _, key = dotted.partition(".")
        if sec not in _SECTIONS or not key:
            raise ValidationError("unknown key", key=dotted, line=lineno)
        attr, coerced = _coerce(sec, key, value, lineno)
        if sec == "data" and key == "component":
            if not isinstance(coerced, tuple) or len(coerced) < 3:
                raise ValidationError(
                    "component rows need [weight, mean..., std]",
                    key=dotted, line=lineno,
                )
            components.append(tuple(float(v) for v in coerced))
            continue
        if dotted in seen:
            raise ValidationError("duplicate key", key=dotted, line=lineno)
        seen.add(dotted)
        staged[sec][attr] = coerced

    if "data.kind" not in seen:
        raise ValidationError("missing required key", key="data.kind")
    if not components:
        raise ValidationError("at least one data.component row is required",
                              key="data.component")
    dim = staged["data"].get("dim", DataSpec().dim)
    for row in components:
        if len(row) != dim + 2:
            raise ValidationError(
                f"component rows need {dim + 2} numbers for dim={dim}",
                key="data.component",
            )
    staged["data"]["components"] = tuple(components)

    cfg = RunConfig(
        **{name: cls(**staged[name]) for name, cls in _SECTIONS.items()},
        grid_lists=tuple(grid_lists),
        grid_max_cells=grid_max_cells,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.data.dim < 1:
        raise ValidationError("dim must be >= 1", key="data.dim")
    if cfg.sampler.steps < 1:
        raise ValidationError("steps must be >= 1", key="sampler.steps")
    if cfg.run.samples < 1:
        raise ValidationError("samples must be >= 1", key="run.samples")
    if not 0 < cfg.sampler.sigma_min < cfg.sampler.sigma_max:
        raise ValidationError("need 0 < sigma_min < sigma_max",
                              key="sampler.sigma_min")
    if cfg.sampler.kind == "dpmpp" and cfg.sampler.order not in (1, 2, 3):
        raise ValidationError("dpmpp order must be 1, 2, or 3",
                              key="sampler.order")
    if cfg.sampler.kind == "unipc" and cfg.sampler.order not in (2, 3, 4):
        raise ValidationError("unipc order must be 2, 3, or 4",
                              key="sampler.order")
    if cfg.model.kind == "mlp" and not cfg.model.path:
        raise ValidationError("model.path is required for model.kind = mlp",
                              key="model.path")
    if cfg.guidance.mode != "none" and cfg.guidance.sigma_lo > cfg.guidance.sigma_hi:
        raise ValidationError("sigma_lo must not exceed sigma_hi",
                              key="guidance.sigma_lo")
    total = sum(row[0] for row in cfg.data.components)
    if abs(total - 1.0) > 1e-9:
        raise ValidationError("component weights must sum to 1",
                              key="data.component")
    try:
        cfg.data.build_gmm()
    except Exception as exc:
        raise ValidationError(str(exc), key="data.component") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        if value == math.inf:
            return "inf"
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines = []
    for section, cls in _SECTIONS.items():
        spec = getattr(cfg, section)
        for f in fields(cls):
            value = getattr(spec, f.name)
            if section == "data" and f.name == "components":
                for row in value:
                    lines.append(f"data.component = {_format_value(tuple(row))}")
                continue
            lines.append(f"{section}.{f.name} = {_format_value(value)}")
    for key, values in cfg.grid_lists:
        lines.append(f"grid.{key} = {_format_value(values)}")
    if cfg.grid_max_cells != RunConfig().grid_max_cells:
        lines.append(f"grid.max_cells = {cfg.grid_max_cells}")
    return "\n".join(lines) + "\n"


def apply_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Return a copy of cfg with one dotted key replaced (for grid cells)."""
    sec, _, key = dotted.partition(".")
    if sec not in _SECTIONS:
        raise ValidationError("unknown key", key=dotted)
    attr, coerced = _coerce(sec, key, value, line=0)
    section_obj = getattr(cfg, sec)
    new_cfg = replace(cfg, **{sec: replace(section_obj, **{attr: coerced})})
    _validate(new_cfg)
    return new_cfg
