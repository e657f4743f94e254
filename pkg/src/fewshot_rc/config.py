"""Run configuration: TOML loading, strict validation, stable hashing.

A run is described by one structured file with sections [corpus], [encoder],
[model], [train], [eval], [adversarial], [augmentation] plus top-level
``seed`` and ``out_dir``.  Every key has a default; unknown sections or keys
are hard errors so typos cannot silently fall back to defaults.  The config
hash is computed over the fully resolved key set, so two files that differ
only in whether a default is spelled out hash identically.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .episodes import EpisodeConfig

__all__ = [
    "ConfigError",
    "CorpusConfig",
    "EncoderConfig",
    "ModelConfig",
    "TrainSettings",
    "EvalSettings",
    "AdversarialConfig",
    "AugmentationConfig",
    "RunConfig",
    "VARIANTS",
    "ABSTAIN_BLIND_VARIANTS",
    "apply_overrides",
    "config_hash",
]


class ConfigError(ValueError):
    """Raised for malformed, mistyped, or inconsistent run configuration."""


VARIANTS = ("proto", "proto-nota", "proto-adv", "pair", "pair-star", "proto-star")

# Variants whose score vector has no abstain entry: they can never predict
# the none-of-the-above label, so they must train at nota_rate 0.
ABSTAIN_BLIND_VARIANTS = frozenset({"proto", "proto-star", "proto-adv", "pair-star"})

_OPTIMIZERS = ("sgd", "sgd-momentum", "adam")

# value kinds understood by the validator
_STR, _INT, _FLOAT, _BOOL, _FLOATS, _STRS = range(6)

_SCHEMA: dict[str, dict[str, tuple[int, Any]]] = {
    "corpus": {
        "train_path": (_STR, ""),
        "eval_path": (_STR, ""),
        "valid_path": (_STR, ""),
        "target_path": (_STR, ""),
        "max_len": (_INT, 128),
        "min_count": (_INT, 1),
    },
    "encoder": {
        "d_word": (_INT, 50),
        "d_pos": (_INT, 5),
        "window": (_INT, 3),
        "n_filters": (_INT, 64),
    },
    "model": {
        "variant": (_STR, "proto"),
    },
    "train": {
        "episodes": (_INT, 2000),
        "n_way": (_INT, 5),
        "k_shot": (_INT, 1),
        "q_queries": (_INT, 1),
        "nota_rate": (_FLOAT, 0.0),
        "exact_count": (_BOOL, False),
        "optimizer": (_STR, "sgd"),
        "lr": (_FLOAT, 0.1),
        "momentum": (_FLOAT, 0.9),
        "beta1": (_FLOAT, 0.9),
        "beta2": (_FLOAT, 0.999),
        "eps": (_FLOAT, 1e-8),
        "valid_every": (_INT, 200),
        "valid_episodes": (_INT, 50),
    },
    "eval": {
        "episodes": (_INT, 1000),
        "repeats": (_INT, 3),
        "n_way": (_INT, 5),
        "k_shot": (_INT, 1),
        "q_queries": (_INT, 5),
        "nota_rate": (_FLOAT, 0.0),
        "nota_rates": (_FLOATS, (0.0, 0.15, 0.30, 0.50)),
        "exact_count": (_BOOL, False),
    },
    "adversarial": {
        "enabled": (_BOOL, False),
        "lambda_start": (_FLOAT, 0.1),
        "lambda_end": (_FLOAT, 1.0),
        "half_batch": (_INT, 4),
        "disc_hidden": (_INT, 100),
        "disc_lr": (_FLOAT, 1e-3),
        "disc_optimizer": (_STR, "adam"),
    },
    "augmentation": {
        "enabled": (_BOOL, False),
        "relations": (_STRS, ()),
        "per_relation": (_INT, 0),
    },
}

_TOP_LEVEL: dict[str, tuple[int, Any]] = {
    "seed": (_INT, 0),
    "out_dir": (_STR, "runs"),
}


@dataclass(frozen=True)
class CorpusConfig:
    train_path: str
    eval_path: str
    valid_path: str
    target_path: str
    max_len: int
    min_count: int


@dataclass(frozen=True)
class EncoderConfig:
    d_word: int
    d_pos: int
    window: int
    n_filters: int


@dataclass(frozen=True)
class ModelConfig:
    variant: str


@dataclass(frozen=True)
class TrainSettings:
    episodes: int
    n_way: int
    k_shot: int
    q_queries: int
    nota_rate: float
    exact_count: bool
    optimizer: str
    lr: float
    momentum: float
    beta1: float
    beta2: float
    eps: float
    valid_every: int
    valid_episodes: int


@dataclass(frozen=True)
class EvalSettings:
    episodes: int
    repeats: int
    n_way: int
    k_shot: int
    q_queries: int
    nota_rate: float
    nota_rates: tuple[float, ...]
    exact_count: bool


@dataclass(frozen=True)
class AdversarialConfig:
    enabled: bool
    lambda_start: float
    lambda_end: float
    half_batch: int
    disc_hidden: int
    disc_lr: float
    disc_optimizer: str


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool
    relations: tuple[str, ...]
    per_relation: int


def _coerce(section: str, key: str, kind: int, value: Any) -> Any:
    where = f"{section}.{key}" if section else key
    if kind == _BOOL:
        if isinstance(value, bool):
            return value
    elif kind == _INT:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind == _FLOAT:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind == _STR:
        if isinstance(value, str):
            return value
    elif kind == _FLOATS:
        if (isinstance(value, (list, tuple))
                and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in value)):
            return tuple(float(v) for v in value)
    elif kind == _STRS:
        if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
            return tuple(value)
    raise ConfigError(f"bad type for {where}: expected "
                      f"{['string', 'integer', 'number', 'boolean', 'number list', 'string list'][kind]},"
                      f" got {value!r}")


def _resolve_section(name: str, given: Mapping[str, Any]) -> dict[str, Any]:
    schema = _SCHEMA[name]
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    out = {}
    for key, (kind, default) in schema.items():
        out[key] = _coerce(name, key, kind, given[key]) if key in given else default
    return out


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved and validated settings for one training/eval run."""

    corpus: CorpusConfig
    encoder: EncoderConfig
    model: ModelConfig
    train: TrainSettings
    eval: EvalSettings
    adversarial: AdversarialConfig
    augmentation: AugmentationConfig
    seed: int
    out_dir: str

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = set(_SCHEMA) | set(_TOP_LEVEL)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        for name in _SCHEMA:
            if name in data and not isinstance(data[name], Mapping):
                raise ConfigError(f"[{name}] must be a table")
        sections = {name: _resolve_section(name, data.get(name, {}))
                    for name in _SCHEMA}
        top = {key: _coerce("", key, kind, data[key]) if key in data else default
               for key, (kind, default) in _TOP_LEVEL.items()}
        cfg = cls(
            corpus=CorpusConfig(**sections["corpus"]),
            encoder=EncoderConfig(**sections["encoder"]),
            model=ModelConfig(**sections["model"]),
            train=TrainSettings(**sections["train"]),
            eval=EvalSettings(**sections["eval"]),
            adversarial=AdversarialConfig(**sections["adversarial"]),
            augmentation=AugmentationConfig(**sections["augmentation"]),
            seed=top["seed"],
            out_dir=top["out_dir"],
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        c = self
        if c.model.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, "
                              f"got {c.model.variant!r}")
        if not c.corpus.train_path:
            raise ConfigError("corpus.train_path is required")
        if c.corpus.max_len < 2:
            raise ConfigError("corpus.max_len must be >= 2")
        if c.corpus.min_count < 1:
            raise ConfigError("corpus.min_count must be >= 1")
        for label, rate in [("train.nota_rate", c.train.nota_rate),
                            ("eval.nota_rate", c.eval.nota_rate),
                            *((f"eval.nota_rates[{i}]", r)
                              for i, r in enumerate(c.eval.nota_rates))]:
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{label} must lie in [0, 1], got {rate}")
        for label, v in [("train.episodes", c.train.episodes),
                         ("train.k_shot", c.train.k_shot),
                         ("train.q_queries", c.train.q_queries),
                         ("train.valid_every", c.train.valid_every),
                         ("train.valid_episodes", c.train.valid_episodes),
                         ("eval.episodes", c.eval.episodes),
                         ("eval.repeats", c.eval.repeats),
                         ("eval.k_shot", c.eval.k_shot),
                         ("eval.q_queries", c.eval.q_queries)]:
            if v < 1:
                raise ConfigError(f"{label} must be >= 1, got {v}")
        for label, v in [("train.n_way", c.train.n_way),
                         ("eval.n_way", c.eval.n_way)]:
            if v < 2:
                raise ConfigError(f"{label} must be >= 2, got {v}")
        if c.train.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {_OPTIMIZERS}")
        if c.adversarial.disc_optimizer not in _OPTIMIZERS:
            raise ConfigError(f"adversarial.disc_optimizer must be one of {_OPTIMIZERS}")
        if c.train.lr <= 0 or c.adversarial.disc_lr <= 0:
            raise ConfigError("learning rates must be positive")

        if (c.model.variant in ABSTAIN_BLIND_VARIANTS
                and c.train.nota_rate > 0):
            raise ConfigError(
                f"variant {c.model.variant!r} has no abstain score and cannot "
                f"train on none-of-the-above queries; set train.nota_rate = 0")

        adv_wanted = c.model.variant == "proto-adv"
        if c.adversarial.enabled != adv_wanted:
            raise ConfigError(
                "adversarial.enabled must be true exactly for variant "
                f"'proto-adv' (variant={c.model.variant!r}, "
                f"enabled={c.adversarial.enabled})")
        if adv_wanted:
            if not c.corpus.target_path:
                raise ConfigError("adversarial training needs corpus.target_path")
            if c.adversarial.half_batch < 1:
                raise ConfigError("adversarial.half_batch must be >= 1")
            if c.adversarial.lambda_start < 0 or c.adversarial.lambda_end < 0:
                raise ConfigError("adversarial lambda schedule must be >= 0")
            if c.adversarial.disc_hidden < 1:
                raise ConfigError("adversarial.disc_hidden must be >= 1")

        if c.augmentation.enabled:
            if not c.corpus.target_path:
                raise ConfigError("augmentation needs corpus.target_path")
            if not c.augmentation.relations:
                raise ConfigError("augmentation.relations must be nonempty")
            if c.augmentation.per_relation < 1:
                raise ConfigError("augmentation.per_relation must be >= 1")
            if len(set(c.augmentation.relations)) != len(c.augmentation.relations):
                raise ConfigError("augmentation.relations has duplicates")

    # -- derived views -----------------------------------------------------

    def train_episode_config(self) -> EpisodeConfig:
        t = self.train
        return EpisodeConfig(t.n_way, t.k_shot, t.q_queries, t.nota_rate,
                             t.exact_count)

    def eval_episode_config(self, alpha: float | None = None) -> EpisodeConfig:
        e = self.eval
        rate = e.nota_rate if alpha is None else alpha
        return EpisodeConfig(e.n_way, e.k_shot, e.q_queries, rate, e.exact_count)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed, "out_dir": self.out_dir}
        for name in _SCHEMA:
            section = getattr(self, name)
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in vars(section).items()}
        return out


def config_hash(cfg: RunConfig) -> str:
    """Short stable digest of the resolved config (first 12 hex chars)."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _parse_override_value(text: str) -> Any:
    def scalar(tok: str) -> Any:
        low = tok.strip()
        if low.lower() in ("true", "false"):
            return low.lower() == "true"
        try:
            return int(low)
        except ValueError:
            pass
        try:
            return float(low)
        except ValueError:
            return low

    if "," in text:
        return [scalar(t) for t in text.split(",")]
    return scalar(text)


def apply_overrides(data: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``key=value``) strings to a raw dict."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        value = _parse_override_value(raw)
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2:
            data.setdefault(parts[0], {})
            if not isinstance(data[parts[0]], dict):
                raise ConfigError(f"cannot override {dotted!r}: not a table")
            data[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"override key {dotted!r} has too many dots")
    return data
