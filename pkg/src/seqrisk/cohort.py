"""Patient records: schema, file ingestion, synthetic cohorts, splits, subgroups.

Record files hold one JSON object per line:

    {"patient_id": str,
     "context": {"gender": "M"|"F", "age_years": number, "ethnicity": str},
     "events": [{"t_hours": number, "feature": str, "value": number|null}],
     "label": int, "los_days": number}

Vocabulary files hold one tab-separated ``token<TAB>id<TAB>count`` triple
per line. Context families are namespaced inside the token column
("gender=M", "ethnicity=groupA"); bare tokens are sequential-event
features. Ids are dense per family.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NEONATE_MAX_AGE_YEARS = 1.0 / 12.0

FAMILIES = ("event", "gender", "ethnicity")
_FAMILY_PREFIX = {"gender": "gender=", "ethnicity": "ethnicity="}


class ParseError(ValueError):
    """A record file line violates the format or a record invariant."""

    def __init__(self, line, reason, column=None):
        at = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{at}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


class VocabularyError(ValueError):
    """Token outside a frozen vocabulary, or families inconsistent."""


@dataclass
class Event:
    t_hours: float
    feature_id: int
    value: float | None = None


@dataclass
class PatientRecord:
    patient_id: str
    gender: str
    age_years: float
    ethnicity: str
    events: list[Event]
    label: int
    los_days: float

    @property
    def is_neonate(self):
        return self.age_years < NEONATE_MAX_AGE_YEARS


class Vocabulary:
    """Dense id <-> token maps per feature family, with training counts."""

    def __init__(self):
        self._token_to_id = {f: {} for f in FAMILIES}
        self._tokens = {f: [] for f in FAMILIES}
        self._counts = {f: [] for f in FAMILIES}

    def add(self, family, token):
        ids = self._token_to_id[family]
        if token in ids:
            return ids[token]
        ids[token] = len(self._tokens[family])
        self._tokens[family].append(token)
        self._counts[family].append(0)
        return ids[token]

    def id(self, family, token, frozen=False):
        ids = self._token_to_id[family]
        if token not in ids:
            if frozen:
                raise VocabularyError(f"unknown {family} token {token!r} (vocabulary frozen)")
            return self.add(family, token)
        return ids[token]

    def token(self, family, idx):
        return self._tokens[family][idx]

    def size(self, family="event"):
        return len(self._tokens[family])

    def count(self, family, idx):
        return self._counts[family][idx]

    def recount(self, records):
        """Reset counts to occurrences in the given records (the train split)."""
        for f in FAMILIES:
            self._counts[f] = [0] * len(self._tokens[f])
        for rec in records:
            self._counts["gender"][self.id("gender", rec.gender)] += 1
            self._counts["ethnicity"][self.id("ethnicity", rec.ethnicity)] += 1
            for ev in rec.events:
                self._counts["event"][ev.feature_id] += 1

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for family in FAMILIES:
                prefix = _FAMILY_PREFIX.get(family, "")
                for idx, tok in enumerate(self._tokens[family]):
                    fh.write(f"{prefix}{tok}\t{idx}\t{self._counts[family][idx]}\n")

    @classmethod
    def load(cls, path):
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(lineno, "expected token<TAB>id<TAB>count")
                tok, idx, count = parts[0], int(parts[1]), int(parts[2])
                family = "event"
                for fam, prefix in _FAMILY_PREFIX.items():
                    if tok.startswith(prefix):
                        family, tok = fam, tok[len(prefix):]
                        break
                got = vocab.add(family, tok)
                if got != idx:
                    raise ParseError(lineno, f"non-dense id {idx} for {family}:{tok}")
                vocab._counts[family][got] = count
        return vocab


@dataclass
class CohortSplit:
    train: list[PatientRecord]
    validation: list[PatientRecord]
    test: list[PatientRecord]
    seed: int


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the seeded synthetic cohort.

    Risk is a logistic score over age, gender, and per-token loadings of
    the patient's events, plus age-band-dependent noise so subgroup
    analyses have structure to find. The intercept is calibrated so the
    positive fraction lands on ``positive_rate`` by construction.
    """

    n_patients: int
    vocab_size: int = 120
    num_classes: int = 2
    positive_rate: float = 0.20
    neonate_rate: float = 0.12
    zipf_exponent: float = 1.1
    mean_days: float = 5.0
    events_per_day: float = 4.0
    # risk-noise std per age band: neonate, <40, <60, <75, 75+
    noise_by_age_band: tuple = (1.1, 0.5, 0.65, 0.8, 1.0)
    ethnicities: tuple = ("groupA", "groupB", "groupC", "groupD")

    def validate(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if self.vocab_size < 10:
            raise ValueError("vocab_size must be at least 10")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must be in (0, 1)")
        if not 0.0 <= self.neonate_rate < 1.0:
            raise ValueError("neonate_rate must be in [0, 1)")
        if self.zipf_exponent <= 0 or self.mean_days <= 0 or self.events_per_day < 0:
            raise ValueError("zipf_exponent/mean_days must be positive, event rate >= 0")
        return self


def zipf_probabilities(vocab_size, exponent):
    ranks = np.arange(1, vocab_size + 1, dtype=float)
    p = ranks ** (-exponent)
    return p / p.sum()


def _age_band(age):
    if age < NEONATE_MAX_AGE_YEARS:
        return 0
    if age < 40:
        return 1
    if age < 60:
        return 2
    if age < 75:
        return 3
    return 4


def generate_synthetic(config, seed):
    """Generate a seeded synthetic cohort and its vocabulary.

    Returns (records, vocabulary). Event tokens are "ev000"-style; their
    marginal frequency follows the configured Zipf law, while label-
    conditional frequencies differ because the label depends on each
    patient's event-token loadings.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    v = config.vocab_size
    width = len(str(v - 1))
    vocab = Vocabulary()
    for i in range(v):
        vocab.add("event", f"ev{i:0{width}d}")
    vocab.add("gender", "F")
    vocab.add("gender", "M")
    for eth in config.ethnicities:
        vocab.add("ethnicity", eth)

    zipf = zipf_probabilities(v, config.zipf_exponent)
    # sparse per-token risk loadings: a mix of frequent and rare tokens
    n_loaded = max(6, v // 8)
    loaded = np.concatenate(
        [np.arange(n_loaded // 2), rng.choice(np.arange(n_loaded // 2, v), n_loaded - n_loaded // 2, replace=False)]
    )
    loadings = np.zeros(v)
    signs = np.where(np.arange(n_loaded) % 2 == 0, 1.0, -1.0)
    loadings[loaded] = signs * rng.uniform(0.35, 0.9, size=n_loaded)

    n = config.n_patients
    genders = np.where(rng.random(n) < 0.5, "F", "M")
    neonate = rng.random(n) < config.neonate_rate
    ages = np.where(
        neonate,
        rng.uniform(0.0, NEONATE_MAX_AGE_YEARS, size=n),
        rng.uniform(18.0, 95.0, size=n),
    )
    ethnicity = rng.choice(np.asarray(config.ethnicities), size=n)
    los = np.clip(rng.lognormal(math.log(config.mean_days), 0.5, size=n), 0.5, 45.0)

    all_events = []
    event_scores = np.zeros(n)
    for i in range(n):
        days = max(1, int(math.ceil(los[i])))
        events = []
        for d in range(days):
            k = rng.poisson(config.events_per_day)
            if k == 0:
                continue
            feats = rng.choice(v, size=k, p=zipf)
            times = np.sort(d * 24.0 + rng.uniform(0.0, 24.0, size=k))
            for t, f in zip(times, feats):
                value = float(rng.normal()) if f < max(1, v // 10) else None
                events.append(Event(float(t), int(f), value))
        all_events.append(events)
        if events:
            s = sum(loadings[ev.feature_id] for ev in events)
            event_scores[i] = 1.6 * s / math.sqrt(len(events))

    age_norm = np.where(neonate, -1.6, (ages - 55.0) / 25.0)
    bands = np.array([_age_band(a) for a in ages])
    noise = rng.normal(size=n) * np.asarray(config.noise_by_age_band)[bands]
    base = 0.9 * age_norm + 0.25 * (genders == "M") + event_scores + noise

    if config.num_classes == 2:
        labels = _calibrated_binary_labels(base, config.positive_rate, rng)
    else:
        labels = _multiclass_labels(base, config.num_classes, rng)

    records = []
    pid_width = len(str(n - 1))
    for i in range(n):
        records.append(
            PatientRecord(
                patient_id=f"p{i:0{pid_width}d}",
                gender=str(genders[i]),
                age_years=float(ages[i]),
                ethnicity=str(ethnicity[i]),
                events=all_events[i],
                label=int(labels[i]),
                los_days=float(los[i]),
            )
        )
    vocab.recount(records)
    return records, vocab


def _calibrated_binary_labels(scores, rate, rng):
    """Bernoulli(logistic(scores + b0)) with b0 bisected so the realized
    positive count equals round(rate * n) under fixed uniform draws."""
    n = len(scores)
    target = int(round(rate * n))
    u = rng.random(n)

    def positives(b0):
        return int(np.sum(u < 1.0 / (1.0 + np.exp(-(scores + b0)))))

    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if positives(mid) < target:
            lo = mid
        else:
            hi = mid
    b0 = hi if abs(positives(hi) - target) <= abs(positives(lo) - target) else lo
    return (u < 1.0 / (1.0 + np.exp(-(scores + b0)))).astype(int)


def _multiclass_labels(scores, k, rng):
    # class logits tilt with the shared risk score so classes stay learnable
    tilt = np.linspace(-1.0, 1.0, k)
    logits = np.outer(scores, tilt) + rng.normal(scale=0.8, size=(len(scores), k))
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return np.array([rng.choice(k, p=row) for row in p])


# ---------------------------------------------------------------------------
# file round trip


def serialize(records, vocab, path):
    """Write records as JSON lines, mapping feature ids back to tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "patient_id": rec.patient_id,
                "context": {
                    "gender": rec.gender,
                    "age_years": rec.age_years,
                    "ethnicity": rec.ethnicity,
                },
                "events": [
                    {
                        "t_hours": ev.t_hours,
                        "feature": vocab.token("event", ev.feature_id),
                        "value": ev.value,
                    }
                    for ev in rec.events
                ],
                "label": rec.label,
                "los_days": rec.los_days,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def ingest(path, vocab=None, frozen=False):
    """Read and validate a record file.

    Returns (records, vocab). With ``frozen=True`` unknown tokens raise
    VocabularyError; otherwise they are assigned fresh ids. Unsorted
    events are sorted with a warning; malformed lines raise ParseError
    carrying the line number.
    """
    if vocab is None:
        if frozen:
            raise VocabularyError("frozen ingestion needs an existing vocabulary")
        vocab = Vocabulary()
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON: {e.msg}", column=e.colno) from None
            records.append(_parse_record(obj, lineno, vocab, frozen))
    if not records:
        log.warning("ingested empty cohort from %s", path)
    return records, vocab


def _parse_record(obj, lineno, vocab, frozen):
    try:
        ctx = obj["context"]
        raw_events = obj["events"]
        rec = PatientRecord(
            patient_id=str(obj["patient_id"]),
            gender=str(ctx["gender"]),
            age_years=float(ctx["age_years"]),
            ethnicity=str(ctx["ethnicity"]),
            events=[],
            label=int(obj["label"]),
            los_days=float(obj["los_days"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(lineno, f"bad record structure: {e}") from None
    if rec.gender not in ("M", "F"):
        raise ParseError(lineno, f"gender must be 'M' or 'F', got {rec.gender!r}")
    if rec.age_years < 0:
        raise ParseError(lineno, "age_years must be >= 0")
    if rec.label < 0:
        raise ParseError(lineno, "label must be a non-negative class index")
    vocab.id("gender", rec.gender, frozen)
    vocab.id("ethnicity", rec.ethnicity, frozen)
    for ev in raw_events:
        try:
            t = float(ev["t_hours"])
            feature = str(ev["feature"])
            value = None if ev.get("value") is None else float(ev["value"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(lineno, f"bad event: {e}") from None
        if t < 0:
            raise ParseError(lineno, "event t_hours must be >= 0")
        rec.events.append(Event(t, vocab.id("event", feature, frozen), value))
    if any(rec.events[i].t_hours > rec.events[i + 1].t_hours for i in range(len(rec.events) - 1)):
        log.warning("line %d: events out of order; sorting", lineno)
        rec.events.sort(key=lambda e: e.t_hours)
    return rec


# ---------------------------------------------------------------------------
# structure operations


def day_bagging(record):
    """Group event feature ids into 1-day blocks.

    Block d holds events with floor(t_hours / 24) == d. Intermediate
    empty days are kept as empty blocks; a record with no events yields
    a single empty block.
    """
    if not record.events:
        return [[]]
    last_day = int(record.events[-1].t_hours // 24.0)
    blocks = [[] for _ in range(last_day + 1)]
    for ev in record.events:
        blocks[int(ev.t_hours // 24.0)].append(ev.feature_id)
    return blocks


def split(records, seed):
    """Patient-disjoint 8:1:1 split with a seeded shuffle."""
    if len(records) < 10:
        raise ValueError(f"need at least 10 records to split, got {len(records)}")
    by_pid = {}
    for rec in records:
        by_pid.setdefault(rec.patient_id, []).append(rec)
    pids = sorted(by_pid)
    np.random.default_rng(np.random.SeedSequence(seed)).shuffle(pids)
    n = len(pids)
    n_val = int(round(n / 10.0))
    n_test = int(round(n / 10.0))
    n_train = n - n_val - n_test
    buckets = (pids[:n_train], pids[n_train : n_train + n_val], pids[n_train + n_val :])
    train, val, test = ([r for p in b for r in by_pid[p]] for b in buckets)
    return CohortSplit(train, val, test, seed)


def subgroups(records):
    """Partition record indices by gender and by age group.

    The age partition separates neonates (< 1 month) and splits the
    remaining patients into quartiles by sorted age rank; within equal
    ages, earlier records take the lower quartile.
    """
    gender = {"F": [], "M": []}
    for i, rec in enumerate(records):
        gender.setdefault(rec.gender, []).append(i)

    age = {"neonate": [], "age_q1": [], "age_q2": [], "age_q3": [], "age_q4": []}
    adults = []
    for i, rec in enumerate(records):
        if rec.is_neonate:
            age["neonate"].append(i)
        else:
            adults.append(i)
    adults.sort(key=lambda i: (records[i].age_years, i))
    n = len(adults)
    for rank, i in enumerate(adults):
        age[f"age_q{min(3, (4 * rank) // n) + 1}"].append(i)
    for groups in (gender, age):
        for key in groups:
            groups[key].sort()
    return {"gender": gender, "age": age}
