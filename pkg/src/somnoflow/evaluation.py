"""Confusion statistics, per-patient metrics, attention maps, hypnogram export.

Wake is the positive class throughout.  Metrics are computed per patient
and then averaged arithmetically over the patients for which each metric
is defined; pooled confusion counts are reported alongside for
reference.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import STAGE_CODES, STAGE_SYMBOLS, SleepRecord, StandardizationStats, preprocess_record
from .errors import ContractError, DimensionError, ParseError
from .model import SleepStager

METRIC_NAMES = ("acc", "se", "sp", "ppv", "npv", "kappa")
THREADS_ENV_VAR = "SOMNOFLOW_THREADS"


def worker_limit(requested: int | None = None) -> int:
    """Worker-thread cap: the SOMNOFLOW_THREADS environment variable bounds
    any requested parallelism (default 1)."""
    env = os.environ.get(THREADS_ENV_VAR)
    cap = max(1, int(env)) if env else 1
    if requested is None:
        return cap
    return max(1, min(requested, cap))


@dataclass
class ConfusionCounts:
    """Wake-positive confusion counts over scored epochs."""

    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fn=self.fn + other.fn,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
        )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionCounts":
        return cls(tp=int(d["tp"]), fn=int(d["fn"]), fp=int(d["fp"]), tn=int(d["tn"]))


@dataclass
class MetricValues:
    """Acc/Se/Sp/PPV/NPV/kappa; ``None`` marks an undefined (0/0) metric."""

    acc: float | None = None
    se: float | None = None
    sp: float | None = None
    ppv: float | None = None
    npv: float | None = None
    kappa: float | None = None

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricValues":
        return cls(**{name: d.get(name) for name in METRIC_NAMES})

    def undefined(self) -> list[str]:
        return [name for name in METRIC_NAMES if getattr(self, name) is None]


@dataclass
class PatientMetrics:
    subject_id: str
    counts: ConfusionCounts
    metrics: MetricValues

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "counts": self.counts.to_dict(),
            "metrics": self.metrics.to_dict(),
            "undefined": self.metrics.undefined(),
        }


@dataclass
class MetricsReport:
    """Per-patient rows, their unweighted average, and pooled counts."""

    patients: list[PatientMetrics]
    average: MetricValues
    pooled_counts: ConfusionCounts
    pooled: MetricValues
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "patients": [p.to_dict() for p in self.patients],
            "average": self.average.to_dict(),
            "pooled": {
                "counts": self.pooled_counts.to_dict(),
                "metrics": self.pooled.to_dict(),
            },
            "metadata": self.metadata,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        patients = [
            PatientMetrics(
                subject_id=p["subject_id"],
                counts=ConfusionCounts.from_dict(p["counts"]),
                metrics=MetricValues.from_dict(p["metrics"]),
            )
            for p in d["patients"]
        ]
        return cls(
            patients=patients,
            average=MetricValues.from_dict(d["average"]),
            pooled_counts=ConfusionCounts.from_dict(d["pooled"]["counts"]),
            pooled=MetricValues.from_dict(d["pooled"]["metrics"]),
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def predicted_labels(probabilities: np.ndarray) -> np.ndarray:
    """Hard labels from (E, 2) probabilities; a tie goes to sleep (class 0)."""
    probabilities = np.asarray(probabilities)
    return (probabilities[:, 1] > probabilities[:, 0]).astype(np.int64)


def confusion(pred, true, epoch_mask=None) -> ConfusionCounts:
    """Count wake-positive agreement over unmasked epochs."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise DimensionError(
            f"prediction has {pred.shape[0]} epochs but truth has {true.shape[0]}"
        )
    if epoch_mask is not None:
        keep = np.asarray(epoch_mask, dtype=bool)
        pred, true = pred[keep], true[keep]
    return ConfusionCounts(
        tp=int(((pred == 1) & (true == 1)).sum()),
        fn=int(((pred == 0) & (true == 1)).sum()),
        fp=int(((pred == 1) & (true == 0)).sum()),
        tn=int(((pred == 0) & (true == 0)).sum()),
    )


def metrics(counts: ConfusionCounts) -> MetricValues:
    """Accuracy, sensitivity, specificity, predictive values, Cohen's kappa.

    Any 0/0 ratio is left undefined (``None``) rather than imputed.
    """
    n = counts.total
    if n == 0:
        raise ContractError("metrics over zero scored epochs")

    def ratio(num: int, den: int) -> float | None:
        return None if den == 0 else num / den

    acc = (counts.tp + counts.tn) / n
    p_expected = (
        (counts.tp + counts.fp) * (counts.tp + counts.fn)
        + (counts.fn + counts.tn) * (counts.fp + counts.tn)
    ) / (n * n)
    kappa = None if p_expected == 1.0 else (acc - p_expected) / (1.0 - p_expected)
    return MetricValues(
        acc=acc,
        se=ratio(counts.tp, counts.tp + counts.fn),
        sp=ratio(counts.tn, counts.tn + counts.fp),
        ppv=ratio(counts.tp, counts.tp + counts.fp),
        npv=ratio(counts.tn, counts.tn + counts.fn),
        kappa=kappa,
    )


def _average(patients: list[PatientMetrics]) -> MetricValues:
    values = {}
    for name in METRIC_NAMES:
        defined = [
            getattr(p.metrics, name)
            for p in patients
            if getattr(p.metrics, name) is not None
        ]
        values[name] = sum(defined) / len(defined) if defined else None
    return MetricValues(**values)


def report_from_predictions(
    rows: list[tuple[str, np.ndarray, np.ndarray]],
    metadata: dict | None = None,
) -> MetricsReport:
    """Build a report from (subject_id, predicted, true) label triples."""
    if not rows:
        raise ContractError("cannot build a metrics report from zero patients")
    patients = []
    pooled = ConfusionCounts()
    for subject_id, pred, true in rows:
        counts = confusion(pred, true)
        pooled = pooled + counts
        patients.append(PatientMetrics(subject_id, counts, metrics(counts)))
    return MetricsReport(
        patients=patients,
        average=_average(patients),
        pooled_counts=pooled,
        pooled=metrics(pooled),
        metadata=metadata or {},
    )


def evaluate_prepared(
    stager: SleepStager,
    records: list[SleepRecord],
    workers: int | None = None,
    metadata: dict | None = None,
) -> MetricsReport:
    """Evaluate already-preprocessed records (inference mode, frozen stats)."""
    if not records:
        raise ContractError("cannot evaluate an empty record list")

    def one(record: SleepRecord) -> tuple[str, np.ndarray, np.ndarray]:
        return record.subject_id, stager.predict(record.hr[None, :]), record.labels

    n_workers = worker_limit(workers if workers is not None else len(records))
    if n_workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(one, records))
    else:
        rows = [one(r) for r in records]
    return report_from_predictions(rows, metadata)


def evaluate_records(
    stager: SleepStager,
    records: list[SleepRecord],
    stats: StandardizationStats,
    workers: int | None = None,
    metadata: dict | None = None,
) -> MetricsReport:
    """Preprocess raw records with the given (training) statistics, then evaluate."""
    prepared = [preprocess_record(r, stats) for r in records]
    return evaluate_prepared(stager, prepared, workers=workers, metadata=metadata)


def evaluate_hypnogram_files(
    paths: dict[str, "str | Path"], metadata: dict | None = None
) -> MetricsReport:
    """Score previously exported hypnogram CSVs (subject_id -> path)."""
    rows = []
    for subject_id in sorted(paths):
        pred, truth = load_hypnogram(paths[subject_id])
        rows.append((subject_id, pred, truth))
    return report_from_predictions(rows, metadata)


# ----------------------------------------------------------------------
# attention maps
# ----------------------------------------------------------------------

@dataclass
class AttentionMap:
    """Mean over heads of one encoder layer's attention matrices."""

    layer: int
    matrix: np.ndarray
    subject_id: str


def extract_attention(
    stager: SleepStager,
    record: SleepRecord,
    stats: StandardizationStats,
) -> list[AttentionMap]:
    """Per-layer head-averaged attention for one record (inference mode)."""
    prepared = preprocess_record(record, stats)
    with ad.no_grad():
        result = stager.forward(
            prepared.hr[None, :], training=False, want_attention=True
        )
    maps = []
    for layer, stacked in enumerate(result.attention):
        maps.append(
            AttentionMap(
                layer=layer,
                matrix=stacked.mean(axis=0),
                subject_id=record.subject_id,
            )
        )
    return maps


def export_attention_csv(amap: AttentionMap, path: str | Path) -> None:
    """CSV of row,col,value triples; the header comment carries the trimmed size."""
    n = amap.matrix.shape[0]
    with open(path, "w", newline="") as f:
        f.write(f"# layer={amap.layer} epochs={n} subject={amap.subject_id}\n")
        writer = csv.writer(f)
        writer.writerow(["row", "col", "value"])
        for r in range(n):
            for c in range(n):
                writer.writerow([r, c, repr(float(amap.matrix[r, c]))])


# ----------------------------------------------------------------------
# hypnogram export
# ----------------------------------------------------------------------

def export_hypnogram(pred, truth, path: str | Path) -> None:
    """CSV ``epoch,pred,truth`` with W/S stage symbols, one row per epoch."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise DimensionError(
            f"prediction has {pred.shape[0]} epochs but truth has {truth.shape[0]}"
        )
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "pred", "truth"])
        for e in range(pred.shape[0]):
            writer.writerow([e, STAGE_SYMBOLS[int(pred[e])], STAGE_SYMBOLS[int(truth[e])]])


def load_hypnogram(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    pred, truth = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["epoch", "pred", "truth"]:
            raise ParseError(f"{path}:1: expected header epoch,pred,truth, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[1] not in STAGE_CODES or row[2] not in STAGE_CODES:
                raise ParseError(f"{path}:{lineno}: malformed hypnogram row {row}")
            pred.append(STAGE_CODES[row[1]])
            truth.append(STAGE_CODES[row[2]])
    return np.array(pred, dtype=np.int64), np.array(truth, dtype=np.int64)
