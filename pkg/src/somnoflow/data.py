"""Heart-rate record ingestion, repair, standardization, batching, and synthesis.

Records are 1 Hz heart-rate series with a per-sample connection-quality
flag (0 = good, 2 = defective) and one wake/sleep label per 30-second
epoch.  Real recordings being unavailable, a seeded two-state Markov
generator produces statistically similar desk-scale datasets.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError, ParseError

EPOCH_LEN = 30
QUALITY_GOOD = 0
QUALITY_DEFECTIVE = 2
STAGE_SYMBOLS = {0: "S", 1: "W"}
STAGE_CODES = {"S": 0, "W": 1}


@dataclass
class SleepRecord:
    """One subject's night: HR samples at 1 Hz, quality flags, per-epoch labels."""

    subject_id: str
    hr: np.ndarray
    quality: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.hr = np.asarray(self.hr, dtype=np.float64)
        self.quality = np.asarray(self.quality, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def length(self) -> int:
        return int(self.hr.shape[0])

    @property
    def n_epochs(self) -> int:
        return int(self.labels.shape[0])

    def validate(self) -> None:
        if self.hr.shape != self.quality.shape:
            raise DataError(
                f"{self.subject_id}: hr has {self.hr.shape[0]} samples but "
                f"quality has {self.quality.shape[0]}"
            )
        if self.length % EPOCH_LEN != 0:
            raise DataError(
                f"{self.subject_id}: length {self.length} is not a multiple of {EPOCH_LEN}"
            )
        if self.n_epochs != self.length // EPOCH_LEN:
            raise DataError(
                f"{self.subject_id}: {self.n_epochs} labels for {self.length} samples"
            )
        bad_q = set(np.unique(self.quality)) - {QUALITY_GOOD, QUALITY_DEFECTIVE}
        if bad_q:
            raise DataError(f"{self.subject_id}: invalid quality values {sorted(bad_q)}")
        bad_l = set(np.unique(self.labels)) - {0, 1}
        if bad_l:
            raise DataError(f"{self.subject_id}: invalid stage codes {sorted(bad_l)}")


@dataclass(frozen=True)
class StandardizationStats:
    """Global mean/std of the repaired training-split HR signal."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError(f"standardization std must be positive, got {self.std}")


def repair_hr(hr, quality) -> np.ndarray:
    """Replace defective-quality samples by linear interpolation between the
    surrounding good samples; boundary runs extend the nearest good value."""
    hr = np.asarray(hr, dtype=np.float64)
    quality = np.asarray(quality)
    if hr.shape != quality.shape:
        raise DimensionError(
            f"hr and quality lengths differ: {hr.shape[0]} vs {quality.shape[0]}"
        )
    good = quality == QUALITY_GOOD
    if not good.any():
        raise DataError("record has no good-quality samples to interpolate from")
    out = hr.copy()
    if good.all():
        return out
    idx = np.arange(hr.shape[0])
    out[~good] = np.interp(idx[~good], idx[good], hr[good])
    return out


def standardize(hr, stats: StandardizationStats) -> np.ndarray:
    """z = (hr - mean) / std, using statistics fitted on the training split only."""
    return (np.asarray(hr, dtype=np.float64) - stats.mean) / stats.std


def unstandardize(z, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


def compute_stats(records: list[SleepRecord]) -> StandardizationStats:
    """Pooled mean/std over the repaired HR of the given (training) records."""
    if not records:
        raise DataError("cannot compute standardization statistics from zero records")
    pooled = np.concatenate([repair_hr(r.hr, r.quality) for r in records])
    std = float(pooled.std())
    if std == 0.0:
        raise ConfigError("training HR signal is constant; standardization undefined")
    return StandardizationStats(mean=float(pooled.mean()), std=std)


def truncate_to_epochs(length: int) -> int:
    return (length // EPOCH_LEN) * EPOCH_LEN


def preprocess_record(record: SleepRecord, stats: StandardizationStats) -> SleepRecord:
    """Repair, truncate to a whole number of epochs, and standardize one record."""
    repaired = repair_hr(record.hr, record.quality)
    keep = truncate_to_epochs(record.length)
    processed = SleepRecord(
        subject_id=record.subject_id,
        hr=standardize(repaired[:keep], stats),
        quality=np.zeros(keep, dtype=np.int64),
        labels=record.labels[: keep // EPOCH_LEN],
    )
    processed.validate()
    return processed


@dataclass
class Batch:
    """Zero-padded stack of records with validity masks and per-epoch labels."""

    inputs: Tensor                 # (N, 1, L_pad)
    sample_mask: np.ndarray        # (N, L_pad) bool, True on real samples
    epoch_mask: np.ndarray         # (N, L_pad/30) bool
    labels: np.ndarray             # (N, L_pad/30) int, 0 where padded
    subject_ids: list[str]
    valid_samples: np.ndarray      # (N,) int

    @property
    def n_records(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def padded_length(self) -> int:
        return int(self.inputs.shape[2])


def make_batches(records: list[SleepRecord], n_batch: int) -> list[Batch]:
    """Sort records by length ascending, group into consecutive batches of
    ``n_batch`` (last may be smaller), zero-pad each to its batch maximum."""
    if n_batch < 1:
        raise ConfigError(f"n_batch must be positive, got {n_batch}")
    if not records:
        return []
    ordered = sorted(records, key=lambda r: (r.length, r.subject_id))
    batches = []
    for start in range(0, len(ordered), n_batch):
        group = ordered[start:start + n_batch]
        pad_len = max(r.length for r in group)
        n_ep = pad_len // EPOCH_LEN
        inputs = np.zeros((len(group), 1, pad_len))
        sample_mask = np.zeros((len(group), pad_len), dtype=bool)
        epoch_mask = np.zeros((len(group), n_ep), dtype=bool)
        labels = np.zeros((len(group), n_ep), dtype=np.int64)
        valid = np.zeros(len(group), dtype=np.int64)
        for i, rec in enumerate(group):
            inputs[i, 0, : rec.length] = rec.hr
            sample_mask[i, : rec.length] = True
            epoch_mask[i, : rec.n_epochs] = True
            labels[i, : rec.n_epochs] = rec.labels
            valid[i] = rec.length
        batches.append(
            Batch(
                inputs=Tensor(inputs),
                sample_mask=sample_mask,
                epoch_mask=epoch_mask,
                labels=labels,
                subject_ids=[r.subject_id for r in group],
                valid_samples=valid,
            )
        )
    return batches


def total_padding(batches: list[Batch]) -> int:
    """Zero samples added across all records of all batches."""
    return int(
        sum(b.n_records * b.padded_length - int(b.valid_samples.sum()) for b in batches)
    )


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic night generator.

    The hypnogram is a two-state Markov chain over 30-second epochs whose
    stationary wake/sleep time ratio defaults to 0.742; per-state HR is
    drawn around state means with AR(1)-smoothed noise, quantized to
    whole beats per minute and clipped to a physiological band.
    """

    wake_sleep_ratio: float = 0.742
    sleep_dwell_epochs: float = 20.0
    stay_sleep: float | None = None
    stay_wake: float | None = None
    epochs_min: int = 100
    epochs_max: int = 140
    sleep_hr_mean: float = 58.0
    sleep_hr_std: float = 2.0
    wake_hr_mean: float = 72.0
    wake_hr_std: float = 6.0
    ar_coeff: float = 0.95
    defect_fraction: float = 0.02
    hr_min: float = 30.0
    hr_max: float = 180.0
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def __post_init__(self):
        if self.wake_sleep_ratio <= 0:
            raise ConfigError("wake_sleep_ratio must be positive")
        if self.sleep_dwell_epochs < 1:
            raise ConfigError("sleep_dwell_epochs must be at least 1")
        if not 0 < self.epochs_min <= self.epochs_max:
            raise ConfigError("need 0 < epochs_min <= epochs_max")
        if not 0.0 <= self.defect_fraction < 1.0:
            raise ConfigError("defect_fraction must lie in [0, 1)")
        if self.sleep_hr_std <= 0 or self.wake_hr_std <= 0:
            raise ConfigError("state HR standard deviations must be positive")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ConfigError("ar_coeff must lie in [0, 1)")
        if not (0.0 <= self.train_fraction <= 1.0 and 0.0 <= self.val_fraction <= 1.0
                and self.train_fraction + self.val_fraction <= 1.0):
            raise ConfigError("split fractions must be in [0, 1] and sum to at most 1")
        self.transition_probs()

    def transition_probs(self) -> tuple[float, float]:
        """(stay_sleep, stay_wake) transition probabilities of the epoch chain."""
        if self.stay_sleep is not None or self.stay_wake is not None:
            if self.stay_sleep is None or self.stay_wake is None:
                raise ConfigError("stay_sleep and stay_wake must be overridden together")
            stay_s, stay_w = float(self.stay_sleep), float(self.stay_wake)
        else:
            leave_sleep = 1.0 / self.sleep_dwell_epochs
            leave_wake = leave_sleep / self.wake_sleep_ratio
            stay_s, stay_w = 1.0 - leave_sleep, 1.0 - leave_wake
        for name, p in (("stay_sleep", stay_s), ("stay_wake", stay_w)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} is not a probability")
        return stay_s, stay_w

    def stationary_wake_fraction(self) -> float:
        stay_s, stay_w = self.transition_probs()
        leave_s, leave_w = 1.0 - stay_s, 1.0 - stay_w
        if leave_s + leave_w == 0.0:
            return self.wake_sleep_ratio / (1.0 + self.wake_sleep_ratio)
        return leave_s / (leave_s + leave_w)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**data)


def synthesize_record(subject_id: str, config: GeneratorConfig, rng: np.random.Generator) -> SleepRecord:
    stay_s, stay_w = config.transition_probs()
    n_epochs = int(rng.integers(config.epochs_min, config.epochs_max + 1))
    wake_frac = config.stationary_wake_fraction()

    labels = np.zeros(n_epochs, dtype=np.int64)
    state = 1 if rng.random() < wake_frac else 0
    stay = (stay_s, stay_w)
    for e in range(n_epochs):
        labels[e] = state
        if rng.random() >= stay[state]:
            state = 1 - state

    length = n_epochs * EPOCH_LEN
    sample_state = np.repeat(labels, EPOCH_LEN)
    means = np.where(sample_state == 1, config.wake_hr_mean, config.sleep_hr_mean)
    stds = np.where(sample_state == 1, config.wake_hr_std, config.sleep_hr_std)

    eps = rng.standard_normal(length)
    noise = np.zeros(length)
    phi = config.ar_coeff
    innovation_scale = math.sqrt(1.0 - phi * phi)
    noise[0] = stds[0] * eps[0]
    for t in range(1, length):
        noise[t] = phi * noise[t - 1] + innovation_scale * stds[t] * eps[t]

    hr = np.clip(np.rint(means + noise), config.hr_min, config.hr_max)
    quality = np.where(
        rng.random(length) < config.defect_fraction, QUALITY_DEFECTIVE, QUALITY_GOOD
    ).astype(np.int64)
    if (quality != QUALITY_GOOD).all():
        quality[0] = QUALITY_GOOD
    hr = np.where(quality == QUALITY_DEFECTIVE, 0.0, hr)

    record = SleepRecord(subject_id=subject_id, hr=hr, quality=quality, labels=labels)
    record.validate()
    return record


def synthesize_dataset(
    n_records: int, seed: int, config: GeneratorConfig | None = None
) -> list[SleepRecord]:
    """Deterministically generate ``n_records`` synthetic nights from ``seed``."""
    if n_records < 0:
        raise ConfigError(f"n_records must be non-negative, got {n_records}")
    config = config if config is not None else GeneratorConfig()
    rng = np.random.default_rng(seed)
    return [
        synthesize_record(f"subj-{i:04d}", config, rng) for i in range(n_records)
    ]


def assign_splits(records: list[SleepRecord], config: GeneratorConfig) -> dict[str, str]:
    """Deterministic contiguous train/val/test assignment by record order."""
    n = len(records)
    n_train = int(math.floor(n * config.train_fraction))
    n_val = int(math.floor(n * config.val_fraction))
    splits = {}
    for i, rec in enumerate(records):
        if i < n_train:
            splits[rec.subject_id] = "train"
        elif i < n_train + n_val:
            splits[rec.subject_id] = "val"
        else:
            splits[rec.subject_id] = "test"
    return splits


# ----------------------------------------------------------------------
# record file I/O
# ----------------------------------------------------------------------

def labels_path_for(record_path: str | Path) -> Path:
    path = Path(record_path)
    return path.with_name(path.stem + ".labels.csv")


def save_record(record: SleepRecord, path: str | Path) -> tuple[Path, Path]:
    """Write the record CSV and its companion labels CSV; returns both paths."""
    record.validate()
    path = Path(path)
    lpath = labels_path_for(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "hr", "quality"])
        for i in range(record.length):
            writer.writerow([i, repr(float(record.hr[i])), int(record.quality[i])])
    with open(lpath, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "stage"])
        for e in range(record.n_epochs):
            writer.writerow([e, STAGE_SYMBOLS[int(record.labels[e])]])
    return path, lpath


def _parse_error(path, lineno: int, message: str) -> ParseError:
    return ParseError(f"{path}:{lineno}: {message}")


def load_record(
    path: str | Path,
    labels_path: str | Path | None = None,
    subject_id: str | None = None,
) -> SleepRecord:
    """Read a record CSV plus labels CSV back into a :class:`SleepRecord`.

    A ragged tail shorter than one epoch is dropped; the label count must
    then match the number of whole epochs.
    """
    path = Path(path)
    lpath = Path(labels_path) if labels_path is not None else labels_path_for(path)
    if subject_id is None:
        subject_id = path.stem

    hr_vals: list[float] = []
    quality_vals: list[int] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["index", "hr", "quality"]:
            raise _parse_error(path, 1, f"expected header index,hr,quality, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise _parse_error(path, lineno, f"expected 3 columns, got {len(row)}")
            try:
                idx = int(row[0])
                hr = float(row[1])
                q = int(row[2])
            except ValueError as exc:
                raise _parse_error(path, lineno, f"unparsable row: {exc}") from None
            if idx != len(hr_vals):
                raise _parse_error(path, lineno, f"index {idx} out of order")
            if q not in (QUALITY_GOOD, QUALITY_DEFECTIVE):
                raise _parse_error(
                    path, lineno, f"quality must be {QUALITY_GOOD} or {QUALITY_DEFECTIVE}, got {q}"
                )
            hr_vals.append(hr)
            quality_vals.append(q)

    if not lpath.exists():
        raise DataError(f"missing labels file {lpath} for record {path}")
    labels: list[int] = []
    with open(lpath, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["epoch", "stage"]:
            raise _parse_error(lpath, 1, f"expected header epoch,stage, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise _parse_error(lpath, lineno, f"expected 2 columns, got {len(row)}")
            try:
                e = int(row[0])
            except ValueError as exc:
                raise _parse_error(lpath, lineno, f"unparsable epoch index: {exc}") from None
            if e != len(labels):
                raise _parse_error(lpath, lineno, f"epoch {e} out of order")
            stage = row[1]
            if stage not in STAGE_CODES:
                raise _parse_error(lpath, lineno, f"stage must be W or S, got {stage!r}")
            labels.append(STAGE_CODES[stage])

    keep = truncate_to_epochs(len(hr_vals))
    if len(labels) != keep // EPOCH_LEN:
        raise _parse_error(
            lpath, 1,
            f"{len(labels)} labels but record holds {keep // EPOCH_LEN} whole epochs",
        )
    record = SleepRecord(
        subject_id=subject_id,
        hr=np.array(hr_vals[:keep]),
        quality=np.array(quality_vals[:keep]),
        labels=np.array(labels),
    )
    record.validate()
    return record


# ----------------------------------------------------------------------
# dataset manifest
# ----------------------------------------------------------------------

def write_manifest(
    path: str | Path,
    subjects: dict[str, dict],
    metadata: dict | None = None,
) -> None:
    """Manifest JSON: subject_id -> {record, labels, split} plus free metadata."""
    doc = {"metadata": metadata or {}, "subjects": subjects}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid manifest JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or "subjects" not in doc:
        raise ParseError(f"{path}:1: manifest must be an object with a 'subjects' key")
    for sid, entry in doc["subjects"].items():
        missing = {"record", "labels", "split"} - set(entry)
        if missing:
            raise ParseError(f"{path}:1: subject {sid} missing keys {sorted(missing)}")
        if entry["split"] not in ("train", "val", "test"):
            raise ParseError(f"{path}:1: subject {sid} has invalid split {entry['split']!r}")
    return doc


def load_split(manifest_path: str | Path, split: str) -> list[SleepRecord]:
    """Load every record of a split, resolving paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    base = manifest_path.parent
    records = []
    for sid in sorted(doc["subjects"]):
        entry = doc["subjects"][sid]
        if entry["split"] != split:
            continue
        records.append(
            load_record(base / entry["record"], base / entry["labels"], subject_id=sid)
        )
    return records
