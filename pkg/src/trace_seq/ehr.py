"""Patient records, vocabularies, and visit vectorization.

A visit is represented by two vectors: ``x``, a multi-hot over the medical
code vocabulary (the primary features), and ``d``, the non-code features:
observation multi-hot, race and gender one-hots, and a numeric tail of
log1p(age) and log1p(days since the patient's first visit). Numeric
features use log1p rather than log so that day 0 stays representable.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ValidationError

CODE_KIND_PREFIXES = {"dx": "diagnosis", "px": "procedure", "rx": "medication"}


def code_kind(code: str) -> str:
    """Kind of a code from its name prefix; unknown prefixes count as diagnoses."""
    prefix = code.split("_", 1)[0]
    return CODE_KIND_PREFIXES.get(prefix, "diagnosis")


# ---------------------------------------------------------------------------
# raw (string-coded) records, as emitted by the generator


@dataclass(frozen=True)
class RawVisit:
    codes: tuple[str, ...]
    observations: tuple[str, ...]
    admit_day: int
    age_years: float


@dataclass(frozen=True)
class RawPatient:
    id: str
    race: str
    gender: str
    visits: tuple[RawVisit, ...]
    label: int


# ---------------------------------------------------------------------------
# vocabularies


@dataclass(frozen=True)
class CodeVocabulary:
    """Dense code-string -> index map with a per-code kind."""

    index: dict[str, int]
    kinds: dict[str, str]
    min_count: int

    def __len__(self) -> int:
        return len(self.index)

    @property
    def codes(self) -> list[str]:
        return sorted(self.index, key=self.index.get)

    def content_hash(self) -> str:
        payload = json.dumps(
            [[c, self.kinds[c]] for c in self.codes], separators=(",", ":")
        )
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class ObservationVocabulary:
    index: dict[str, int]

    def __len__(self) -> int:
        return len(self.index)

    @property
    def names(self) -> list[str]:
        return sorted(self.index, key=self.index.get)

    def content_hash(self) -> str:
        payload = json.dumps(self.names, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def build_vocabularies(
    corpus: Sequence[RawPatient],
    min_count: int = 1,
    label_codes: Iterable[str] = (),
) -> tuple[CodeVocabulary, ObservationVocabulary]:
    """Index codes and observations seen in the corpus.

    Codes occurring in fewer than ``min_count`` visits are dropped, as are
    any label-defining codes. Index assignment is lexicographic, so record
    order never matters.
    """
    if not corpus:
        raise ValidationError("build_vocabularies: empty corpus")
    label_codes = set(label_codes)
    code_counts: dict[str, int] = {}
    obs_names: set[str] = set()
    for patient in corpus:
        for visit in patient.visits:
            for code in set(visit.codes):
                code_counts[code] = code_counts.get(code, 0) + 1
            obs_names.update(visit.observations)
    kept = sorted(
        c for c, n in code_counts.items() if n >= min_count and c not in label_codes
    )
    codes = CodeVocabulary(
        index={c: i for i, c in enumerate(kept)},
        kinds={c: code_kind(c) for c in kept},
        min_count=min_count,
    )
    obs = ObservationVocabulary(index={o: i for i, o in enumerate(sorted(obs_names))})
    return codes, obs


# ---------------------------------------------------------------------------
# indexed records


@dataclass(frozen=True)
class Visit:
    """One hospital visit with vocabulary indices instead of strings."""

    code_indices: tuple[int, ...]
    observation_indices: tuple[int, ...]
    admit_day: int
    age_years: float


@dataclass(frozen=True)
class PatientRecord:
    id: str
    race: str
    gender: str
    visits: tuple[Visit, ...]
    label: int


@dataclass(frozen=True)
class FeatureSpace:
    """Everything needed to map a visit to its fixed-width vectors."""

    codes: CodeVocabulary
    observations: ObservationVocabulary
    races: tuple[str, ...]
    genders: tuple[str, ...]

    @property
    def n_codes(self) -> int:
        return len(self.codes)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    @property
    def n_demographics(self) -> int:
        return len(self.races) + len(self.genders)

    @property
    def dim(self) -> int:
        # |codes| + |observations| + one-hots + (log age, log days)
        return self.n_codes + self.n_observations + self.n_demographics + 2

    def feature_names(self) -> list[str]:
        names = list(self.codes.codes)
        names += [f"obs:{o}" for o in self.observations.names]
        names += [f"race:{r}" for r in self.races]
        names += [f"gender:{g}" for g in self.genders]
        names += ["log_age", "log_days"]
        return names


def build_feature_space(
    corpus: Sequence[RawPatient],
    min_count: int = 1,
    label_codes: Iterable[str] = (),
) -> FeatureSpace:
    codes, obs = build_vocabularies(corpus, min_count, label_codes)
    races = tuple(sorted({p.race for p in corpus}))
    genders = tuple(sorted({p.gender for p in corpus}))
    return FeatureSpace(codes=codes, observations=obs, races=races, genders=genders)


def index_patients(
    corpus: Sequence[RawPatient], space: FeatureSpace
) -> list[PatientRecord]:
    """Convert raw records to indexed ones under the given vocabularies.

    Codes/observations outside the vocabularies are dropped; a visit left
    without any diagnosis code is dropped; a patient left without visits is
    dropped. Admission days stay anchored to the patient's original first
    visit, preserving true history depth even when early visits fall away.
    """
    out = []
    for p in corpus:
        visits = []
        for v in p.visits:
            idx = tuple(
                sorted(space.codes.index[c] for c in set(v.codes) if c in space.codes.index)
            )
            if not any(
                space.codes.kinds[space.codes.codes[i]] == "diagnosis" for i in idx
            ):
                continue
            oidx = tuple(
                sorted(
                    space.observations.index[o]
                    for o in set(v.observations)
                    if o in space.observations.index
                )
            )
            visits.append(
                Visit(
                    code_indices=idx,
                    observation_indices=oidx,
                    admit_day=v.admit_day,
                    age_years=v.age_years,
                )
            )
        if visits:
            out.append(
                PatientRecord(
                    id=p.id, race=p.race, gender=p.gender,
                    visits=tuple(visits), label=p.label,
                )
            )
    return out


# ---------------------------------------------------------------------------
# vectorization


@dataclass
class VisitVector:
    """The pair (x, d): code multi-hot and non-code feature vector."""

    x: np.ndarray
    d: np.ndarray

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate([self.x, self.d])


def vectorize_visit(v: Visit, patient: PatientRecord, space: FeatureSpace) -> VisitVector:
    x = np.zeros(space.n_codes)
    for i in v.code_indices:
        if not 0 <= i < space.n_codes:
            raise DataError(f"code index {i} out of range [0, {space.n_codes})")
        x[i] = 1.0
    obs = np.zeros(space.n_observations)
    for i in v.observation_indices:
        if not 0 <= i < space.n_observations:
            raise DataError(f"observation index {i} out of range [0, {space.n_observations})")
        obs[i] = 1.0
    race = np.zeros(len(space.races))
    try:
        race[space.races.index(patient.race)] = 1.0
    except ValueError:
        raise DataError(f"unknown race {patient.race!r}") from None
    gender = np.zeros(len(space.genders))
    try:
        gender[space.genders.index(patient.gender)] = 1.0
    except ValueError:
        raise DataError(f"unknown gender {patient.gender!r}") from None
    numeric = np.array([np.log1p(v.age_years), np.log1p(float(v.admit_day))])
    return VisitVector(x=x, d=np.concatenate([obs, race, gender, numeric]))


def assemble_sequence(
    p: PatientRecord, space: FeatureSpace, max_visits: int = 30
) -> list[VisitVector]:
    """Vectorize the patient's most recent ``max_visits`` visits, in order.

    Truncation drops the oldest visits; timestamps are not re-anchored.
    """
    if max_visits < 1:
        raise ValidationError(f"max_visits must be >= 1, got {max_visits}")
    if not p.visits:
        raise ValidationError(f"patient {p.id!r} has no usable visits")
    return [vectorize_visit(v, p, space) for v in p.visits[-max_visits:]]


# ---------------------------------------------------------------------------
# cohort file: newline-delimited JSON with a self-describing header line


COHORT_FORMAT = "trace-seq-cohort"
COHORT_VERSION = 1


def _space_to_header(space: FeatureSpace, seed: int, extra: dict | None = None) -> dict:
    header = {
        "format": COHORT_FORMAT,
        "version": COHORT_VERSION,
        "seed": int(seed),
        "codes": [[c, space.codes.kinds[c]] for c in space.codes.codes],
        "min_count": space.codes.min_count,
        "observations": space.observations.names,
        "races": list(space.races),
        "genders": list(space.genders),
        "code_vocab_sha256": space.codes.content_hash(),
        "observation_vocab_sha256": space.observations.content_hash(),
    }
    if extra:
        header.update(extra)
    return header


def save_cohort(
    path: str | Path,
    patients: Sequence[PatientRecord],
    space: FeatureSpace,
    seed: int,
    split: dict[str, str] | None = None,
    extra_header: dict | None = None,
) -> None:
    """Write one header line plus one JSON line per patient, atomically."""
    path = Path(path)
    split = split or {}
    lines = [json.dumps(_space_to_header(space, seed, extra_header), sort_keys=True)]
    for p in patients:
        lines.append(
            json.dumps(
                {
                    "id": p.id,
                    "race": p.race,
                    "gender": p.gender,
                    "label": p.label,
                    "split": split.get(p.id),
                    "visits": [
                        {
                            "codes": list(v.code_indices),
                            "observations": list(v.observation_indices),
                            "admit_day": v.admit_day,
                            "age_years": round(v.age_years, 6),
                        }
                        for v in p.visits
                    ],
                },
                sort_keys=True,
            )
        )
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_cohort(
    path: str | Path,
) -> tuple[list[PatientRecord], FeatureSpace, int, dict[str, str]]:
    """Read a cohort file; returns (patients, feature space, seed, split)."""
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != COHORT_FORMAT:
            raise ValidationError(f"{path}: not a cohort file")
        codes = CodeVocabulary(
            index={c: i for i, (c, _) in enumerate(header["codes"])},
            kinds={c: k for c, k in header["codes"]},
            min_count=header["min_count"],
        )
        obs = ObservationVocabulary(
            index={o: i for i, o in enumerate(header["observations"])}
        )
        space = FeatureSpace(
            codes=codes,
            observations=obs,
            races=tuple(header["races"]),
            genders=tuple(header["genders"]),
        )
        if codes.content_hash() != header["code_vocab_sha256"]:
            raise ValidationError(f"{path}: code vocabulary hash mismatch")
        patients = []
        split: dict[str, str] = {}
        for line in fh:
            rec = json.loads(line)
            patients.append(
                PatientRecord(
                    id=rec["id"],
                    race=rec["race"],
                    gender=rec["gender"],
                    label=rec["label"],
                    visits=tuple(
                        Visit(
                            code_indices=tuple(v["codes"]),
                            observation_indices=tuple(v["observations"]),
                            admit_day=v["admit_day"],
                            age_years=v["age_years"],
                        )
                        for v in rec["visits"]
                    ),
                )
            )
            if rec.get("split"):
                split[rec["id"]] = rec["split"]
    return patients, space, int(header["seed"]), split
