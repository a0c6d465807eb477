"""Patient visit sequences: data model, synthetic cohorts, labeling, splits, batching, IO."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .numerics import Rng

log = logging.getLogger(__name__)

COHORT_SCHEMA = "seqbench-cohort/1"
PAD_ID = 0
PAD_CODE = "<pad>"
ENCOUNTER_KINDS = ("inpatient", "transfer", "recurring", "other")


class CohortFormatError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


class EncounterOrderError(ValueError):
    pass


@dataclass(frozen=True)
class Visit:
    delta_days: int
    codes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.delta_days < 0:
            raise ValueError(f"delta_days must be >= 0, got {self.delta_days}")
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: int
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if len(self.visits) < 1:
            raise ValueError(f"patient {self.patient_id} has no visits")
        object.__setattr__(self, "visits", tuple(self.visits))


class Vocabulary:
    """Code string to integer id; id 0 is reserved for padding."""

    def __init__(self, codes: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._codes: list[str] = [PAD_CODE]
        for c in codes:
            self.add(c)

    def add(self, code: str) -> int:
        if code == PAD_CODE:
            raise ValueError("the padding token cannot be added as a code")
        if code not in self._ids:
            self._ids[code] = len(self._codes)
            self._codes.append(code)
        return self._ids[code]

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> Vocabulary:
        vocab = cls()
        ids = sorted(mapping.values())
        if ids != list(range(1, len(ids) + 1)):
            raise CohortFormatError("vocabulary ids must be exactly 1..N")
        for code, _ in sorted(mapping.items(), key=lambda kv: kv[1]):
            vocab.add(code)
        return vocab

    def to_mapping(self) -> dict[str, int]:
        return dict(self._ids)

    def id(self, code: str) -> int:
        return self._ids[code]

    def code(self, idx: int) -> str:
        return self._codes[idx]

    def __len__(self) -> int:
        # includes PAD
        return len(self._codes)

    def __contains__(self, code: str) -> bool:
        return code in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._codes == other._codes

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} ids incl. PAD)"


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the planted-signal cohort generator.

    Latent risk sums recency-weighted effects of a set of risk codes and a signed
    bonus for each designated code pair depending on which member came first.
    Pair members carry no risk on their own, so a bag-of-codes model cannot read
    the pair term.
    """

    n_patients: int = 1000
    vocab_size: int = 200
    risk_fraction: float = 0.1
    mean_visits: float = 6.0
    mean_codes_per_visit: float = 4.0
    mean_gap_days: float = 60.0
    interaction_strength: float = 4.0
    decay_rate: float = 1.0 / 365.0
    prevalence: float = 0.3
    seed: int = 0
    n_order_pairs: int = 3
    pair_rate: float = 0.6
    risk_weight_scale: float = 1.0

    def __post_init__(self):
        positive = ("n_patients", "vocab_size", "risk_fraction", "mean_visits", "mean_codes_per_visit",
                    "mean_gap_days", "interaction_strength", "decay_rate", "n_order_pairs", "pair_rate",
                    "risk_weight_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"GeneratorSpec.{name} must be positive")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie strictly between 0 and 1")
        if not 0.0 < self.risk_fraction < 1.0 or self.pair_rate > 1.0:
            raise ValueError("risk_fraction and pair_rate must be fractions")
        if self.mean_visits < 2:
            raise ValueError("mean_visits must be at least 2")
        n_codes = self.vocab_size - 1
        if n_codes < int(self.risk_fraction * n_codes) + 2 * self.n_order_pairs + 4:
            raise ValueError("vocab_size too small for the requested risk codes and pairs")


TASK_PREVALENCE = {
    # case fractions of the two published cohorts
    "hf": 5010 / (5010 + 37719),
    "readm": 5897 / (5897 + 4757),
}


def spec_for_task(task: str, **overrides) -> GeneratorSpec:
    if task not in TASK_PREVALENCE:
        raise ValueError(f"unknown task {task!r}")
    params = {"prevalence": TASK_PREVALENCE[task]}
    params.update({k: v for k, v in overrides.items() if v is not None})
    return GeneratorSpec(**params)


@dataclass(frozen=True)
class CohortStructure:
    """The hidden ground truth behind a generated cohort."""

    code_weights: np.ndarray
    order_pairs: tuple[tuple[int, int], ...]
    background: np.ndarray
    bias: float


def _cohort_structure(spec: GeneratorSpec) -> tuple[np.ndarray, tuple[tuple[int, int], ...], np.ndarray]:
    rng = Rng(spec.seed).stream("structure")
    n_codes = spec.vocab_size - 1
    ids = rng.permutation(np.arange(1, spec.vocab_size))
    n_risk = max(1, int(round(spec.risk_fraction * n_codes)))
    risk_ids = ids[:n_risk]
    pair_ids = ids[n_risk:n_risk + 2 * spec.n_order_pairs]
    weights = np.zeros(spec.vocab_size)
    weights[risk_ids] = rng.normal(0.0, spec.risk_weight_scale, size=n_risk)
    pairs = tuple((int(a), int(b)) for a, b in pair_ids.reshape(-1, 2))
    # Zipf-like background frequencies; pair members only enter when planted
    background = np.zeros(spec.vocab_size)
    filler = ids[:n_risk].tolist() + ids[n_risk + 2 * spec.n_order_pairs:].tolist()
    ranks = rng.permutation(len(filler)) + 1
    background[filler] = 1.0 / ranks ** 0.8
    background /= background.sum()
    return weights, pairs, background


def _generate_patient(spec: GeneratorSpec, index: int, pairs, background) -> tuple[list[Visit], float]:
    rng = Rng(spec.seed).stream("patient", index)
    max_visits = max(2, int(math.ceil(3 * spec.mean_visits)))
    n_visits = min(max_visits, 2 + int(rng.poisson(spec.mean_visits - 2)))
    visits_codes: list[list[int]] = []
    for _ in range(n_visits):
        k = 1 + int(rng.poisson(max(spec.mean_codes_per_visit - 1.0, 0.0)))
        k = min(k, int(np.count_nonzero(background)))
        visits_codes.append(rng.choice(spec.vocab_size, size=k, replace=False, p=background).tolist())
    for a, b in pairs:
        if rng.random() < spec.pair_rate:
            first, second = sorted(rng.choice(n_visits, size=2, replace=False).tolist())
            if rng.random() < 0.5:
                a, b = b, a
            visits_codes[first].append(a)
            visits_codes[second].append(b)
    gaps = [0] + [int(round(rng.exponential(spec.mean_gap_days))) for _ in range(n_visits - 1)]
    visits = [Visit(dt, tuple(sorted(set(codes)))) for dt, codes in zip(gaps, visits_codes)]
    u = float(rng.random())
    return visits, u


def latent_risk(visits: Sequence[Visit], spec: GeneratorSpec, weights: np.ndarray,
                pairs: Sequence[tuple[int, int]]) -> float:
    """Planted risk of one visit history, before the calibrated bias."""
    deltas = np.array([v.delta_days for v in visits], dtype=float)
    # days from each visit to the last one
    age = np.concatenate([np.cumsum(deltas[:0:-1])[::-1], [0.0]])
    decay = np.exp(-spec.decay_rate * age)
    risk = 0.0
    first_seen: dict[int, int] = {}
    for t, v in enumerate(visits):
        if v.codes:
            risk += decay[t] * float(weights[list(v.codes)].sum())
        for c in v.codes:
            first_seen.setdefault(c, t)
    for a, b in pairs:
        ta, tb = first_seen.get(a), first_seen.get(b)
        if ta is None or tb is None or ta == tb:
            continue
        risk += spec.interaction_strength if ta < tb else -spec.interaction_strength
    return risk


def _calibrate_bias(risk: np.ndarray, target: float, iters: int = 200) -> float:
    lo, hi = -60.0, 60.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if expit(mid + risk).mean() < target:
            lo = mid
        else:
            hi = mid
    bias = 0.5 * (lo + hi)
    if abs(expit(bias + risk).mean() - target) > 1e-3:
        raise CalibrationError(f"prevalence {target} unreachable with the planted weights")
    return bias


def generate_cohort(spec: GeneratorSpec, return_structure: bool = False):
    """Synthetic cohort with planted sequential signal.

    Returns ``(records, vocab)``, or ``(records, vocab, structure)`` when
    ``return_structure`` is set. Each patient draws from its own stream keyed by
    patient index so a patient's history does not depend on cohort size.
    """
    weights, pairs, background = _cohort_structure(spec)
    vocab = Vocabulary(f"C{i:04d}" for i in range(1, spec.vocab_size))
    histories = []
    risks = np.empty(spec.n_patients)
    draws = np.empty(spec.n_patients)
    for i in range(spec.n_patients):
        visits, u = _generate_patient(spec, i, pairs, background)
        histories.append(visits)
        risks[i] = latent_risk(visits, spec, weights, pairs)
        draws[i] = u
    bias = _calibrate_bias(risks, spec.prevalence)
    labels = (draws < expit(bias + risks)).astype(int)
    records = [PatientRecord(f"P{i:06d}", int(labels[i]), tuple(histories[i])) for i in range(spec.n_patients)]
    if return_structure:
        return records, vocab, CohortStructure(weights, pairs, background, bias)
    return records, vocab


# ---------------------------------------------------------------------------
# readmission labeling


@dataclass(frozen=True)
class Encounter:
    patient_id: str
    admit_day: int
    discharge_day: int
    kind: str = "inpatient"
    codes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ENCOUNTER_KINDS:
            raise ValueError(f"unknown encounter kind {self.kind!r}")
        if self.discharge_day < self.admit_day:
            raise EncounterOrderError(f"{self.patient_id}: discharge before admit")
        object.__setattr__(self, "codes", tuple(self.codes))

    def to_json(self) -> dict:
        return {"patient_id": self.patient_id, "admit_day": self.admit_day,
                "discharge_day": self.discharge_day, "kind": self.kind, "codes": list(self.codes)}

    @classmethod
    def from_json(cls, obj: dict) -> Encounter:
        return cls(str(obj["patient_id"]), int(obj["admit_day"]), int(obj["discharge_day"]),
                   obj.get("kind", "inpatient"), tuple(obj.get("codes", ())))


@dataclass(frozen=True)
class ReadmissionLabel:
    patient_id: str
    label: int | None
    index: int | None  # position of the index encounter in the patient's list
    gap_days: int | None = None

    @property
    def excluded(self) -> bool:
        return self.label is None


CASE_MAX_GAP = 30  # case when gap < 30
CONTROL_MIN_GAP = 90  # control when gap > 90


def _group_encounters(encounters: Iterable[Encounter]) -> dict[str, list[Encounter]]:
    grouped: dict[str, list[Encounter]] = {}
    for e in encounters:
        grouped.setdefault(e.patient_id, []).append(e)
    for pid, group in grouped.items():
        for prev, cur in zip(group, group[1:]):
            if cur.admit_day < prev.admit_day:
                raise EncounterOrderError(f"{pid}: encounters not sorted by admit_day")
            if cur.admit_day < prev.discharge_day:
                raise EncounterOrderError(f"{pid}: encounter at day {cur.admit_day} overlaps previous stay")
    return grouped


def build_readmission_labels(encounters: Iterable[Encounter]) -> list[ReadmissionLabel]:
    """One label per patient from the first pair of consecutive inpatient stays.

    Transfer, recurring and other encounters are dropped before pairing. Gap
    under 30 days is a case, over 90 a control; anything in between, and
    patients with no readmission at all, are excluded.
    """
    out = []
    for pid, group in _group_encounters(encounters).items():
        qualifying = [i for i, e in enumerate(group) if e.kind == "inpatient"]
        if len(qualifying) < 2:
            out.append(ReadmissionLabel(pid, None, None))
            continue
        i, j = qualifying[0], qualifying[1]
        gap = group[j].admit_day - group[i].discharge_day
        if gap < CASE_MAX_GAP:
            label = 1
        elif gap > CONTROL_MIN_GAP:
            label = 0
        else:
            label = None
        out.append(ReadmissionLabel(pid, label, i, gap))
    return out


def readmission_records(encounters: Sequence[Encounter], vocab: Vocabulary | None = None,
                        ) -> tuple[list[PatientRecord], Vocabulary]:
    """Model inputs for labeled patients: every encounter up to the index stay."""
    vocab = vocab if vocab is not None else Vocabulary()
    grouped = _group_encounters(encounters)
    records = []
    for lab in build_readmission_labels(encounters):
        if lab.excluded:
            continue
        history = grouped[lab.patient_id][: lab.index + 1]
        visits, prev = [], None
        for e in history:
            dt = 0 if prev is None else e.admit_day - prev
            prev = e.admit_day
            visits.append(Visit(dt, tuple(sorted({vocab.add(c) for c in e.codes}))))
        records.append(PatientRecord(lab.patient_id, lab.label, tuple(visits)))
    return records, vocab


# ---------------------------------------------------------------------------
# splitting and batching


def split_cohort(records: Sequence[PatientRecord], ratios=(0.7, 0.1, 0.2), seed: int = 0,
                 ) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Stratified train/valid/test split.

    Within each label class the members are shuffled by ``seed``; valid and test
    take floor(ratio * n) each and train keeps the remainder. Each split keeps the
    input order.
    """
    if len(records) < 10:
        raise ValueError("split_cohort needs at least 10 records")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    labels = np.array([r.label for r in records])
    classes = [np.flatnonzero(labels == c) for c in (0, 1)]
    if any(0 < len(members) < 3 for members in classes) or any(len(m) == 0 for m in classes):
        warnings.warn("a label class has fewer than 3 members; splitting without stratification",
                      stacklevel=2)
        classes = [np.arange(len(records))]
    rng = Rng(seed).stream("split")
    parts: list[list[int]] = [[], [], []]
    for members in classes:
        shuffled = rng.permutation(members)
        n_valid = int(math.floor(ratios[1] * len(shuffled)))
        n_test = int(math.floor(ratios[2] * len(shuffled)))
        parts[1].extend(shuffled[:n_valid].tolist())
        parts[2].extend(shuffled[n_valid:n_valid + n_test].tolist())
        parts[0].extend(shuffled[n_valid + n_test:].tolist())
    train, valid, test = ([records[i] for i in sorted(p)] for p in parts)
    return train, valid, test


@dataclass
class Batch:
    codes: np.ndarray  # [B, T, C] int, PAD = 0
    code_mask: np.ndarray  # [B, T, C] float
    visit_mask: np.ndarray  # [B, T] float
    delta_days: np.ndarray  # [B, T] float
    labels: np.ndarray  # [B] float
    lengths: np.ndarray = field(default=None)  # [B] int

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = self.visit_mask.sum(axis=1).astype(np.int64)

    def __len__(self) -> int:
        return self.codes.shape[0]


def pad_batch(records: Sequence[PatientRecord]) -> Batch:
    if not records:
        raise ValueError("cannot batch an empty list of records")
    B = len(records)
    T = max(len(r.visits) for r in records)
    C = max(1, max(len(v.codes) for r in records for v in r.visits))
    codes = np.zeros((B, T, C), dtype=np.int64)
    code_mask = np.zeros((B, T, C))
    visit_mask = np.zeros((B, T))
    delta = np.zeros((B, T))
    for b, r in enumerate(records):
        for t, v in enumerate(r.visits):
            n = len(v.codes)
            codes[b, t, :n] = v.codes
            code_mask[b, t, :n] = 1.0
            visit_mask[b, t] = 1.0
            delta[b, t] = v.delta_days
    labels = np.array([r.label for r in records], dtype=float)
    return Batch(codes, code_mask, visit_mask, delta, labels)


def batch_visits(records: Sequence[PatientRecord], batch_size: int,
                 order: Sequence[int] | None = None) -> Iterator[Batch]:
    """Padded batches of ``batch_size`` records, in ``order`` if given."""
    if not records:
        raise ValueError("cannot batch an empty list of records")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    idx = range(len(records)) if order is None else order
    idx = list(idx)
    for start in range(0, len(idx), batch_size):
        yield pad_batch([records[i] for i in idx[start:start + batch_size]])


class PaddedCohort:
    """Whole cohort padded once; batches are cut by index and trimmed."""

    def __init__(self, records: Sequence[PatientRecord]):
        full = pad_batch(records)
        self.codes, self.code_mask = full.codes, full.code_mask
        self.visit_mask, self.delta_days, self.labels = full.visit_mask, full.delta_days, full.labels
        self.lengths = full.lengths
        self.n_codes = full.code_mask.sum(axis=2).astype(np.int64)

    def __len__(self) -> int:
        return self.codes.shape[0]

    def batch(self, idx: np.ndarray) -> Batch:
        idx = np.asarray(idx)
        T = int(self.lengths[idx].max())
        C = max(1, int(self.n_codes[idx].max()))
        return Batch(self.codes[idx, :T, :C], self.code_mask[idx, :T, :C], self.visit_mask[idx, :T],
                     self.delta_days[idx, :T], self.labels[idx], self.lengths[idx])

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[Batch]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


# ---------------------------------------------------------------------------
# persistence


def _record_to_json(r: PatientRecord) -> dict:
    return {"id": r.patient_id, "label": r.label,
            "visits": [{"dt": v.delta_days, "codes": list(v.codes)} for v in r.visits]}


def _record_from_json(obj: dict, vocab_len: int) -> PatientRecord:
    visits = []
    for v in obj["visits"]:
        codes = tuple(int(c) for c in v["codes"])
        if any(c <= PAD_ID or c >= vocab_len for c in codes):
            raise ValueError("code id outside the vocabulary")
        visits.append(Visit(int(v["dt"]), codes))
    label = obj["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise ValueError(f"bad label {label!r}")
    return PatientRecord(str(obj["id"]), int(label), tuple(visits))


def persist(records: Iterable[PatientRecord], vocab: Vocabulary, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": COHORT_SCHEMA, "vocab": vocab.to_mapping()}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(_record_to_json(r), separators=(",", ":")) + "\n")


def load(path) -> tuple[list[PatientRecord], Vocabulary]:
    """Read a cohort file. A zero-byte file is an empty cohort with an empty vocabulary."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return [], Vocabulary()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{path}:1: malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("schema") != COHORT_SCHEMA:
        got = header.get("schema") if isinstance(header, dict) else None
        raise CohortFormatError(f"{path}:1: unknown schema {got!r}, expected {COHORT_SCHEMA!r}")
    if not isinstance(header.get("vocab"), dict):
        raise CohortFormatError(f"{path}:1: header has no vocab section")
    vocab = Vocabulary.from_mapping(header["vocab"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(_record_from_json(json.loads(line), len(vocab)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CohortFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records, vocab


def load_encounters(path) -> list[Encounter]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Encounter.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CohortFormatError(f"{path}:{lineno}: malformed encounter ({exc})") from None
    return out
