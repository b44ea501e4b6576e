"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .cascade_sim import CascadeConfig, ConfigError
from .gates import HardConcrete
from .models import MODEL_KINDS

DOMAINS = ("exposure_only", "entire_chain")
FEATURE_SETS = ("all", "half")
GATE_PLACEMENTS = ("routing_and_towers", "routing_only")
_SIM = CascadeConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    # simulator (defaults shared with CascadeConfig)
    n_users: int = _SIM.n_users
    n_items: int = _SIM.n_items
    latent_dim: int = _SIM.latent_dim
    n_fields: int = _SIM.n_fields
    relevance_scale: float = _SIM.relevance_scale
    relevance_bias: float = _SIM.relevance_bias
    attr_noise: float = _SIM.attr_noise
    pool_size: int = _SIM.pool_size
    stage_sizes: tuple[int, ...] = _SIM.stage_sizes
    stage_noise: tuple[float, ...] = _SIM.stage_noise
    stage_bias: tuple[float, ...] = _SIM.stage_bias
    n_train_requests: int = _SIM.n_train_requests
    n_eval_requests: int = _SIM.n_eval_requests
    rates: tuple[float, ...] = _SIM.rates
    # model and training
    model: str = "ecm"
    domain: str = "entire_chain"
    towers: int = 3
    features: str = "all"
    gate_placement: str = "routing_and_towers"
    l0_lambda: float = 1e-5
    hc_beta: float = 0.7
    hc_gamma: float = -0.1
    hc_zeta: float = 1.1
    log_alpha_init: float = 2.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 5
    steps: int = 0
    seed: int = 0
    eval_ks: tuple[int, ...] = (1, 10, 50)
    head: str = "t1"

    def validate(self) -> "ExperimentConfig":
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.features not in FEATURE_SETS:
            raise ConfigError(f"features must be one of {FEATURE_SETS}, got {self.features!r}")
        if self.gate_placement not in GATE_PLACEMENTS:
            raise ConfigError(f"gate_placement must be one of {GATE_PLACEMENTS}")
        if self.towers not in (3, 4):
            raise ConfigError("towers must be 3 or 4")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.steps < 0:
            raise ConfigError("learning_rate, batch_size, epochs and steps must be positive")
        if self.l0_lambda < 0:
            raise ConfigError("l0_lambda must be non-negative")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigError("eval_ks must be positive integers")
        try:
            self.hard_concrete()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.cascade().validate()
        return self

    def cascade(self) -> CascadeConfig:
        return CascadeConfig(
            n_users=self.n_users,
            n_items=self.n_items,
            latent_dim=self.latent_dim,
            n_fields=self.n_fields,
            relevance_scale=self.relevance_scale,
            relevance_bias=self.relevance_bias,
            attr_noise=self.attr_noise,
            pool_size=self.pool_size,
            stage_sizes=tuple(self.stage_sizes),
            stage_noise=tuple(self.stage_noise),
            stage_bias=tuple(self.stage_bias),
            n_train_requests=self.n_train_requests,
            n_eval_requests=self.n_eval_requests,
            rates=tuple(self.rates),
        )

    def hard_concrete(self) -> HardConcrete:
        return HardConcrete(self.hc_beta, self.hc_gamma, self.hc_zeta)

    def kept_fields(self) -> list[int]:
        n = self.n_fields if self.features == "all" else -(-self.n_fields // 2)
        return list(range(n))

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


SIM_KEYS = tuple(f.name for f in fields(CascadeConfig))


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    updates: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _parse(key, value, getattr(base, key))
    return replace(base, **updates).validate()


def load_config(path: str | Path | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if path is None:
        return (base or ExperimentConfig()).validate()
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(ExperimentConfig))
