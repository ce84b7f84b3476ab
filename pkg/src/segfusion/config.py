"""
Run configuration and its line-based ``section.key = value`` file format.

Sections: ``train``, ``loss``, ``model``, ``data``. Blank lines and ``#``
comments are ignored. Every field has a default, and :func:`dump_config`
writes the fully resolved set so a run can be reproduced from its echo.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigurationError

RUNGS = ("transfer", "transfer_moe", "contrastive_moe", "dual_contrastive_moe")

# auxiliary terms each rung is allowed to weight
RUNG_TERMS = {
    "transfer": frozenset(),
    "transfer_moe": frozenset(),
    "contrastive_moe": frozenset({"con"}),
    "dual_contrastive_moe": frozenset({"con", "cka", "mi"}),
}


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    gamma: float = 1.0
    lambda_con: float = 1.0
    lambda_cka: float = 0.5
    lambda_mi: float = 0.5
    rung: str = "dual_contrastive_moe"
    include_positives: bool = False
    class_weighting: bool = True

    def weights(self) -> dict[str, float]:
        return {"con": self.lambda_con, "cka": self.lambda_cka, "mi": self.lambda_mi}

    def validate(self) -> "LossConfig":
        if self.tau <= 0 or self.gamma <= 0:
            raise ConfigurationError("temperatures tau and gamma must be strictly positive")
        if self.rung not in RUNGS:
            raise ConfigurationError(f"unknown rung {self.rung!r}; choose from {', '.join(RUNGS)}")
        for term, lam in self.weights().items():
            if lam < 0:
                raise ConfigurationError(f"lambda_{term} must be non-negative, got {lam}")
            if lam > 0 and term not in RUNG_TERMS[self.rung]:
                raise ConfigurationError(
                    f"lambda_{term}={lam} but rung {self.rung!r} has no {term} term"
                )
        return self

    def for_rung(self, rung: str) -> "LossConfig":
        """Copy moved to ``rung`` with weights of unsupported terms zeroed."""
        if rung not in RUNGS:
            raise ConfigurationError(f"unknown rung {rung!r}")
        allowed = RUNG_TERMS[rung]
        return replace(
            self,
            rung=rung,
            lambda_con=self.lambda_con if "con" in allowed else 0.0,
            lambda_cka=self.lambda_cka if "cka" in allowed else 0.0,
            lambda_mi=self.lambda_mi if "mi" in allowed else 0.0,
        )


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    latent: int = 128
    n_experts: int = 8
    expert_sizes: tuple[int, ...] = (32, 32)
    head_sizes: tuple[int, ...] = (32, 16)
    projector_activation: str = "tanh"

    def validate(self) -> "ModelConfig":
        if self.dim < 1 or self.latent < 1:
            raise ConfigurationError("model.dim and model.latent must be positive")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"model.heads={self.heads} must divide model.dim={self.dim}")
        if self.n_experts < 1:
            raise ConfigurationError("model.n_experts must be at least 1")
        if self.projector_activation not in ("tanh", "relu", "identity"):
            raise ConfigurationError(f"unknown projector activation {self.projector_activation!r}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    folds: int = 5
    seed: int = 0
    workers: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigurationError(
                f"train.batch_size={self.batch_size}: the contrastive and MI losses "
                "compare documents within a batch and need at least 2"
            )
        if self.folds < 2:
            raise ConfigurationError("train.folds must be at least 2")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigurationError("train.epochs and train.lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigurationError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.workers < 1:
            raise ConfigurationError("train.workers must be at least 1")
        self.loss.validate()
        self.model.validate()
        return self

    def with_rung(self, rung: str) -> "TrainConfig":
        return replace(self, loss=self.loss.for_rung(rung))


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flat_fields(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


@dataclass(frozen=True)
class RunConfig:
    """Everything the command line needs: training setup plus data generation."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: object = None  # SyntheticSpec, filled lazily to avoid an import cycle

    def __post_init__(self):
        if self.data is None:
            from .corpus import SyntheticSpec

            object.__setattr__(self, "data", SyntheticSpec())

    def sections(self) -> dict[str, object]:
        return {"train": self.train, "loss": self.train.loss, "model": self.train.model, "data": self.data}

    def override(self, pairs: dict[str, str]) -> "RunConfig":
        sections = self.sections()
        updates: dict[str, dict] = {name: {} for name in sections}
        for key, raw in pairs.items():
            section, _, name = key.partition(".")
            if section not in sections or not name:
                raise ConfigurationError(f"unknown config key {key!r}")
            known = _flat_fields(sections[section])
            if name not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            updates[section][name] = _parse_value(raw, known[name], key)
        loss = replace(self.train.loss, **updates["loss"])
        model = replace(self.train.model, **updates["model"])
        train = replace(self.train, loss=loss, model=model, **updates["train"])
        data = replace(self.data, **updates["data"])
        return RunConfig(train=train, data=data)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return (base or RunConfig()).override(pairs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in cfg.sections().items():
        for name, value in _flat_fields(obj).items():
            lines.append(f"{section}.{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
