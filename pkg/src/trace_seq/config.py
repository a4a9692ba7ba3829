"""Experiment configuration: TOML in, validated dataclasses out.

Every knob has a default (the published training setup: downsized feature
dim 100, embedding/hidden size 128, dropout 0.5, Adadelta at lr 1.0, 50
epochs, 100-patient batches, 30-visit cap, six controls per case, 75/10/15
split), so an empty file is a complete configuration. Unknown keys and
out-of-range values are rejected with the offending field path.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .cohort import GeneratorConfig, default_hazard_weights
from .errors import ConfigError
from .predictor import VARIANTS


@dataclass
class CohortSection:
    n_patients: int = 2000
    n_codes: int = 100
    n_observations: int = 50
    code_offset: int = 0
    mean_visits: float = 7.0
    max_total_visits: int = 24
    n_topics: int = 5
    codes_per_visit: float = 3.0
    obs_per_visit: float = 2.0
    gap_days_min: int = 15
    gap_days_max: int = 150
    age_min: float = 30.0
    age_max: float = 80.0
    min_count: int = 1
    hazard_intercept: float = -6.0
    hazard_age_weight: float = 0.3
    hazard_decay_days: float = 90.0
    risk_topic_mass: float = 0.30
    use_default_hazard: bool = True
    hazard_weights: dict = field(default_factory=dict)


@dataclass
class PretrainSection:
    n_patients: int = 600
    n_codes: int = 160
    code_offset: int = 20
    n_observations: int = 0
    mean_visits: float = 6.0
    min_count: int = 1
    epochs: int = 50
    seed_offset: int = 1000


@dataclass
class AutoencoderSection:
    encoder: str = "transformer"
    epochs: int = 50


@dataclass
class TrainSection:
    variant: str = "TRACE"
    epochs: int = 50


@dataclass
class HyperSection:
    downsized_dim: int = 100
    embed_dim: int = 128
    ff_dim: int = 0            # 0 -> 4 * embed_dim
    attention_dim: int = 0     # 0 -> embed_dim
    dropout: float = 0.5
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    batch_size: int = 100
    max_visits: int = 30
    controls_per_case: int = 6
    split: tuple = (0.75, 0.10, 0.15)
    med2vec_window: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 42
    out_dir: str = "out"
    cohort: CohortSection = field(default_factory=CohortSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    hyper: HyperSection = field(default_factory=HyperSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"]["split"] = list(self.hyper.split)
        return d

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def generator_config(self) -> GeneratorConfig:
        c = self.cohort
        cfg = GeneratorConfig(
            seed=self.seed,
            n_patients=c.n_patients,
            n_codes=c.n_codes,
            n_observations=c.n_observations,
            code_offset=c.code_offset,
            mean_visits=c.mean_visits,
            max_total_visits=c.max_total_visits,
            n_topics=c.n_topics,
            codes_per_visit=c.codes_per_visit,
            obs_per_visit=c.obs_per_visit,
            gap_days_min=c.gap_days_min,
            gap_days_max=c.gap_days_max,
            age_min=c.age_min,
            age_max=c.age_max,
            hazard_intercept=c.hazard_intercept,
            hazard_age_weight=c.hazard_age_weight,
            hazard_decay_days=c.hazard_decay_days,
            risk_topic_mass=c.risk_topic_mass,
        )
        if c.hazard_weights:
            cfg.hazard_weights = dict(c.hazard_weights)
        elif c.use_default_hazard:
            cfg.hazard_weights = default_hazard_weights(cfg)
        return cfg

    def pretrain_generator_config(self) -> GeneratorConfig:
        p = self.pretrain
        return GeneratorConfig(
            seed=self.seed + p.seed_offset,
            n_patients=p.n_patients,
            n_codes=p.n_codes,
            n_observations=p.n_observations,
            code_offset=p.code_offset,
            mean_visits=p.mean_visits,
            hazard_weights={},
        )


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _fill(section, raw: dict, path: str, casts: dict | None = None):
    casts = casts or {}
    known = set(section.__dataclass_fields__)
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key '{path}.{key}'" if path else f"unknown key '{key}'")
        if key in casts:
            value = casts[key](value)
        setattr(section, key, value)
    return section


def _validate(cfg: ExperimentConfig) -> None:
    h = cfg.hyper
    _check(h.downsized_dim >= 2, "hyper.downsized_dim", "must be at least 2")
    _check(h.embed_dim >= 2, "hyper.embed_dim", "must be at least 2")
    _check(0.0 <= h.dropout < 1.0, "hyper.dropout", "must lie in [0, 1)")
    _check(h.lr > 0, "hyper.lr", "must be positive")
    _check(0.0 < h.rho < 1.0, "hyper.rho", "must lie in (0, 1)")
    _check(h.eps > 0, "hyper.eps", "must be positive")
    _check(h.batch_size >= 1, "hyper.batch_size", "must be at least 1")
    _check(h.max_visits >= 1, "hyper.max_visits", "must be at least 1")
    _check(h.controls_per_case >= 1, "hyper.controls_per_case", "must be at least 1")
    _check(h.med2vec_window >= 1, "hyper.med2vec_window", "must be at least 1")
    _check(len(h.split) == 3, "hyper.split", "must have three fractions")
    _check(all(f >= 0 for f in h.split), "hyper.split", "fractions must be nonnegative")
    _check(abs(sum(h.split) - 1.0) < 1e-9, "hyper.split", "fractions must sum to 1")
    _check(cfg.train.variant in VARIANTS, "train.variant", f"must be one of {VARIANTS}")
    _check(cfg.train.epochs >= 1, "train.epochs", "must be at least 1")
    _check(cfg.autoencoder.encoder in ("transformer", "relu"), "autoencoder.encoder",
           "must be 'transformer' or 'relu'")
    _check(cfg.autoencoder.epochs >= 1, "autoencoder.epochs", "must be at least 1")
    _check(cfg.pretrain.epochs >= 1, "pretrain.epochs", "must be at least 1")
    _check(cfg.cohort.n_patients >= 1, "cohort.n_patients", "must be at least 1")
    _check(cfg.cohort.n_codes >= 1, "cohort.n_codes", "must be at least 1")
    _check(cfg.cohort.min_count >= 1, "cohort.min_count", "must be at least 1")
    _check(cfg.cohort.gap_days_min >= 0, "cohort.gap_days_min", "must be nonnegative")
    _check(cfg.cohort.gap_days_max >= cfg.cohort.gap_days_min, "cohort.gap_days_max",
           "must be >= gap_days_min")


def load_config(path: str | Path | None = None, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Parse and validate a TOML config; CLI overrides win over the file."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    cfg = ExperimentConfig()
    sections = {
        "cohort": (cfg.cohort, {"hazard_weights": dict}),
        "pretrain": (cfg.pretrain, {}),
        "autoencoder": (cfg.autoencoder, {}),
        "train": (cfg.train, {}),
        "hyper": (cfg.hyper, {"split": tuple}),
    }
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key == "out_dir":
            cfg.out_dir = str(value)
        elif key in sections:
            section, casts = sections[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            _fill(section, value, key, casts)
        else:
            raise ConfigError(f"unknown key '{key}'")
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    _validate(cfg)
    return cfg
