"""Synthetic population generation, case-control matching, and splits.

The generator plants a recoverable onset signal: each patient draws a
latent topic mixture; topic 0 concentrates on designated risk codes
(hypertension/diabetes analogs). At every visit after the first, onset
fires with probability sigmoid(intercept + recency-weighted risk-code
exposure + age term). Exposure decays exponentially with elapsed days, so
*recent* risk-code activity drives onset. Sequence models can read that
timing; bag-of-counts baselines cannot, which is what makes the planted
signal discriminating.

Patients who fire become cases; their onset visit is the label visit and
is not stored. Patients who never fire become controls; their last visit
is the label visit and is likewise dropped. Stored visit lists therefore
contain feature visits only.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ehr import PatientRecord, RawPatient, RawVisit, code_kind
from .errors import ConfigError, ValidationError


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def global_code_name(i: int) -> str:
    """Name of global code index i; the prefix fixes its kind."""
    if i % 10 < 4:
        prefix = "dx"
    elif i % 10 < 7:
        prefix = "px"
    else:
        prefix = "rx"
    return f"{prefix}_{i:04d}"


@dataclass
class GeneratorConfig:
    """Knobs for one synthetic population."""

    seed: int = 0
    n_patients: int = 2000
    n_codes: int = 100
    n_observations: int = 50
    code_offset: int = 0           # shifts the code universe (overlap control)
    mean_visits: float = 7.0
    max_total_visits: int = 24     # includes the label visit
    n_topics: int = 5
    codes_per_visit: float = 3.0
    obs_per_visit: float = 2.0
    gap_days_min: int = 15
    gap_days_max: int = 150
    age_min: float = 30.0
    age_max: float = 80.0
    races: tuple[str, ...] = ("asian", "black", "hispanic", "white")
    race_probs: tuple[float, ...] = (0.1, 0.2, 0.2, 0.5)
    genders: tuple[str, ...] = ("F", "M")
    gender_probs: tuple[float, ...] = (0.5, 0.5)
    # map code name -> hazard weight; empty means no planted signal
    hazard_weights: dict[str, float] = field(default_factory=dict)
    hazard_intercept: float = -6.0
    hazard_age_weight: float = 0.3   # per decade above 55 at the visit
    hazard_decay_days: float = 90.0  # exposure half-life scale
    risk_topic_mass: float = 0.30    # fraction of topic-0 code draws that are risk codes

    def code_names(self) -> list[str]:
        return [global_code_name(self.code_offset + i) for i in range(self.n_codes)]

    def validate(self) -> None:
        if self.n_patients < 1 or self.n_codes < 1:
            raise ValidationError("generator: need at least one patient and one code")
        if self.mean_visits < 2.5:
            raise ValidationError("generator: mean_visits must be at least 2.5")
        if self.max_total_visits < 2:
            raise ValidationError("generator: max_total_visits must be >= 2")
        if abs(sum(self.race_probs) - 1.0) > 1e-9 or len(self.race_probs) != len(self.races):
            raise ValidationError("generator: race_probs must match races and sum to 1")
        if abs(sum(self.gender_probs) - 1.0) > 1e-9 or len(self.gender_probs) != len(self.genders):
            raise ValidationError("generator: gender_probs must match genders and sum to 1")
        names = set(self.code_names())
        missing = [c for c in self.hazard_weights if c not in names]
        if missing:
            raise ValidationError(f"generator: hazard codes outside vocabulary: {missing}")
        if not all(np.isfinite(list(self.hazard_weights.values()) or [0.0])):
            raise ValidationError("generator: hazard weights must be finite")
        if self.hazard_weights and not (0.0 < self.risk_topic_mass < 1.0):
            raise ValidationError("generator: risk_topic_mass must lie in (0, 1)")
        if not any(code_kind(c) == "diagnosis" for c in self.code_names()):
            raise ValidationError("generator: code universe has no diagnosis codes")


def default_hazard_weights(cfg: GeneratorConfig, w1: float = 5.0, w2: float = 6.0) -> dict[str, float]:
    """Weights on the first two diagnosis codes of the universe."""
    dx = [c for c in cfg.code_names() if code_kind(c) == "diagnosis"]
    if len(dx) < 2:
        raise ValidationError("need at least two diagnosis codes for default hazard")
    return {dx[0]: w1, dx[1]: w2}


@dataclass
class _Topics:
    code_probs: np.ndarray  # (n_topics, n_codes)
    obs_probs: np.ndarray   # (n_topics, n_observations)
    dx_mask: np.ndarray


def _build_topics(cfg: GeneratorConfig) -> _Topics:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    names = cfg.code_names()
    logits = rng.normal(size=(cfg.n_topics, cfg.n_codes)) * 1.2
    risk_idx = [i for i, c in enumerate(names) if c in cfg.hazard_weights]
    if risk_idx:
        logits[1:, risk_idx] -= 2.0  # background topics rarely emit risk codes
    code_probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    code_probs /= code_probs.sum(axis=1, keepdims=True)
    if risk_idx:
        # topic 0 is the at-risk phenotype; pin its risk-code mass exactly so
        # the planted case rate stays stable across seeds
        p0 = code_probs[0]
        others = np.setdiff1d(np.arange(cfg.n_codes), risk_idx)
        p0[risk_idx] = cfg.risk_topic_mass / len(risk_idx)
        p0[others] *= (1.0 - cfg.risk_topic_mass) / p0[others].sum()
    if cfg.n_observations > 0:
        ologits = rng.normal(size=(cfg.n_topics, cfg.n_observations)) * 1.2
        ologits[0, : min(4, cfg.n_observations)] += 1.5
        obs_probs = np.exp(ologits - ologits.max(axis=1, keepdims=True))
        obs_probs /= obs_probs.sum(axis=1, keepdims=True)
    else:
        obs_probs = np.zeros((cfg.n_topics, 0))
    dx_mask = np.array([code_kind(c) == "diagnosis" for c in names])
    return _Topics(code_probs=code_probs, obs_probs=obs_probs, dx_mask=dx_mask)


def _draw_codes(rng, probs, dx_mask, k, names):
    k = min(k, len(names))
    picked = rng.choice(len(names), size=k, replace=False, p=probs)
    chosen = set(int(i) for i in picked)
    if not any(dx_mask[i] for i in chosen):
        dx_probs = probs * dx_mask
        dx_probs = dx_probs / dx_probs.sum()
        chosen.add(int(rng.choice(len(names), p=dx_probs)))
    return tuple(sorted(names[i] for i in chosen))


def generate_population(cfg: GeneratorConfig) -> list[RawPatient]:
    """Generate a reproducible population; see the module docstring."""
    cfg.validate()
    topics = _build_topics(cfg)
    names = cfg.code_names()
    obs_names = [f"obs_{i:04d}" for i in range(cfg.n_observations)]
    patients = []
    for i in range(cfg.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, i)))
        race = cfg.races[rng.choice(len(cfg.races), p=cfg.race_probs)]
        gender = cfg.genders[rng.choice(len(cfg.genders), p=cfg.gender_probs)]
        age0 = rng.uniform(cfg.age_min, cfg.age_max)
        theta = rng.dirichlet(np.full(cfg.n_topics, 0.4))
        extra = int(rng.geometric(1.0 / (cfg.mean_visits - 1.0)))
        total = 1 + min(extra, cfg.max_total_visits - 1)  # in [2, max_total_visits]

        visits: list[RawVisit] = []
        day = 0
        label = 0
        exposures: list[tuple[int, float]] = []  # (day, summed weight)
        for t in range(1, total + 1):
            if t > 1:
                day += int(rng.integers(cfg.gap_days_min, cfg.gap_days_max + 1))
            age = age0 + day / 365.25
            topic = int(rng.choice(cfg.n_topics, p=theta))
            k = 1 + int(rng.poisson(max(cfg.codes_per_visit - 1.0, 0.0)))
            codes = _draw_codes(rng, topics.code_probs[topic], topics.dx_mask, k, names)
            if cfg.n_observations > 0:
                ko = min(int(rng.poisson(cfg.obs_per_visit)), cfg.n_observations)
                obs = tuple(
                    sorted(
                        obs_names[int(j)]
                        for j in rng.choice(
                            cfg.n_observations, size=ko, replace=False,
                            p=topics.obs_probs[topic],
                        )
                    )
                ) if ko else ()
            else:
                obs = ()
            if t >= 2:
                exposure = sum(
                    w * np.exp(-(day - d) / cfg.hazard_decay_days) for d, w in exposures if w
                )
                score = (
                    cfg.hazard_intercept
                    + exposure
                    + cfg.hazard_age_weight * (age - 55.0) / 10.0
                )
                if rng.uniform() < _sigmoid(score):
                    label = 1
                    break  # visit t is the onset visit; not stored
            visits.append(RawVisit(codes=codes, observations=obs, admit_day=day, age_years=age))
            w_here = float(sum(cfg.hazard_weights.get(c, 0.0) for c in codes))
            exposures.append((day, w_here))
        if label == 0:
            visits.pop()  # the last visit is the (negative) label visit
        patients.append(
            RawPatient(
                id=f"p{i:06d}", race=race, gender=gender,
                visits=tuple(visits), label=label,
            )
        )
    return patients


# ---------------------------------------------------------------------------
# propensity scores


def fit_propensity(
    patients: Sequence[PatientRecord | RawPatient],
    max_steps: int = 10_000,
    grad_tol: float = 1e-6,
    lr: float = 2.0,
) -> np.ndarray:
    """Logistic regression of case status on age, gender, and race.

    Fitted by full-batch gradient descent on mean binary cross entropy
    until the gradient norm drops below ``grad_tol`` or the step budget
    runs out. Age is taken at the last stored (input) visit. Returns
    in-sample probabilities aligned with ``patients``.
    """
    y = np.array([float(p.label) for p in patients])
    if y.min() == y.max():
        raise ValidationError("fit_propensity: need both cases and controls")
    races = sorted({p.race for p in patients})
    genders = sorted({p.gender for p in patients})
    cols = [np.array([p.visits[-1].age_years for p in patients])]
    for r in races:
        cols.append(np.array([1.0 if p.race == r else 0.0 for p in patients]))
    for g in genders:
        cols.append(np.array([1.0 if p.gender == g else 0.0 for p in patients]))
    x = np.stack(cols, axis=1)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(max_steps):
        z = x @ w + b
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        err = (p - y) / n
        gw = x.T @ err
        gb = err.sum()
        if np.sqrt((gw * gw).sum() + gb * gb) < grad_tol:
            break
        w -= lr * gw
        b -= lr * gb
    z = x @ w + b
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


# ---------------------------------------------------------------------------
# greedy nearest-neighbor matching on the logit scale


@dataclass
class MatchResult:
    """Case -> controls assignment with logit-scale distances."""

    pairs: list[tuple[str, str, float]]  # (case_id, control_id, distance)

    @property
    def table(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for case, control, _ in self.pairs:
            out.setdefault(case, []).append(control)
        return out

    def control_ids(self) -> set[str]:
        return {c for _, c, _ in self.pairs}


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


def greedy_match(
    case_ids: Sequence[str],
    control_ids: Sequence[str],
    scores: dict[str, float],
    k: int = 6,
) -> MatchResult:
    """Match each case to its k nearest unused controls.

    Cases are processed in descending propensity order (hardest first, ties
    by id); distance is the absolute difference of logit scores; control
    ties also break by id. Matching is without replacement.
    """
    if len(control_ids) < k * len(case_ids):
        deficit = k * len(case_ids) - len(control_ids)
        raise ValidationError(
            f"greedy_match: need {k * len(case_ids)} controls for "
            f"{len(case_ids)} cases, short by {deficit}"
        )
    case_order = sorted(case_ids, key=lambda i: (-scores[i], i))
    ctl = sorted(control_ids)
    ctl_logit = _logit(np.array([scores[c] for c in ctl]))
    used = np.zeros(len(ctl), dtype=bool)
    pairs = []
    for case in case_order:
        d = np.abs(ctl_logit - _logit(np.array([scores[case]]))[0])
        order = np.lexsort((np.array(ctl), d))
        taken = 0
        for j in order:
            if used[j]:
                continue
            used[j] = True
            pairs.append((case, ctl[j], float(d[j])))
            taken += 1
            if taken == k:
                break
    return MatchResult(pairs=pairs)


def save_match_table(path: str | Path, match: MatchResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "control_id", "distance"])
        for case, control, dist in match.pairs:
            writer.writerow([case, control, f"{dist:.12g}"])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# stratified split


def stratified_split(
    patients: Sequence[PatientRecord | RawPatient],
    fractions: Sequence[float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> dict[str, str]:
    """Assign train/valid/test per patient, stratified by label.

    Within each class: floor(f_train * n) go to train, floor(f_valid * n)
    to valid, and the remainder to test, after a seeded shuffle. This keeps
    each split's prevalence within one patient of the cohort's.
    """
    if len(fractions) != 3:
        raise ConfigError("stratified_split: need exactly three fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"stratified_split: fractions sum to {sum(fractions)}, not 1")
    if any(f < 0 for f in fractions):
        raise ConfigError("stratified_split: fractions must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    out: dict[str, str] = {}
    for label in (1, 0):
        ids = sorted(p.id for p in patients if p.label == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        n_train = int(np.floor(fractions[0] * n))
        n_valid = int(np.floor(fractions[1] * n))
        for i, pid in enumerate(ids):
            if i < n_train:
                out[pid] = "train"
            elif i < n_train + n_valid:
                out[pid] = "valid"
            else:
                out[pid] = "test"
    return out


# ---------------------------------------------------------------------------
# matched cohort assembly


@dataclass
class Cohort:
    """Matched case-control population with split assignments."""

    patients: list[PatientRecord]
    match_table: dict[str, list[str]]
    split: dict[str, str]

    def ids(self, split: str) -> list[str]:
        return [p.id for p in self.patients if self.split[p.id] == split]

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.id: p for p in self.patients}

    @property
    def prevalence(self) -> float:
        labels = [p.label for p in self.patients]
        return sum(labels) / len(labels)


def build_matched_cohort(
    patients: Sequence[PatientRecord],
    controls_per_case: int = 6,
    split_fractions: Sequence[float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> tuple[Cohort, MatchResult]:
    """Propensity-match, keep cases plus matched controls, and split."""
    scores_arr = fit_propensity(patients)
    scores = {p.id: float(s) for p, s in zip(patients, scores_arr)}
    case_ids = [p.id for p in patients if p.label == 1]
    control_ids = [p.id for p in patients if p.label == 0]
    match = greedy_match(case_ids, control_ids, scores, k=controls_per_case)
    keep = set(case_ids) | match.control_ids()
    kept = [p for p in patients if p.id in keep]
    split = stratified_split(kept, split_fractions, seed)
    return Cohort(patients=kept, match_table=match.table, split=split), match
