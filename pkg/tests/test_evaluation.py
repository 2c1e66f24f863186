"""Evaluation tests: confusion counting, metric formulas, reports, attention maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnoflow.data import GeneratorConfig, compute_stats, synthesize_dataset
from somnoflow.errors import ContractError
from somnoflow.evaluation import (
    AttentionMap,
    ConfusionCounts,
    MetricsReport,
    confusion,
    evaluate_records,
    export_attention_csv,
    export_hypnogram,
    extract_attention,
    load_hypnogram,
    metrics,
    predicted_labels,
    report_from_predictions,
    worker_limit,
)
from somnoflow.model import ModelConfig, SleepStager

TINY = dict(
    d_model=16, n_heads=2, d_ffn=32, n_encoder_layers=2,
    channels=(2, 4, 8, 16), l_max=256,
)


def brute_force_counts(pred, true):
    tp = fn = fp = tn = 0
    for p, t in zip(pred, true):
        if p == 1 and t == 1:
            tp += 1
        elif p == 0 and t == 1:
            fn += 1
        elif p == 1 and t == 0:
            fp += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fn=fn, fp=fp, tn=tn)


class TestConfusion:
    def test_perfect_agreement(self):
        true = np.array([0, 1, 1, 0, 1])
        counts = confusion(true, true)
        assert counts.fp == 0 and counts.fn == 0
        assert counts.tp == 3 and counts.tn == 2

    def test_all_sleep_prediction_on_all_wake_truth(self):
        counts = confusion(np.zeros(6, dtype=int), np.ones(6, dtype=int))
        assert counts.tp == 0 and counts.fn == 6

    def test_random_case_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 2, size=20)
        true = rng.integers(0, 2, size=20)
        counts = confusion(pred, true)
        assert counts == brute_force_counts(pred, true)

    def test_mask_restricts_counting(self):
        pred = np.array([1, 0, 1])
        true = np.array([1, 1, 0])
        counts = confusion(pred, true, np.array([True, True, False]))
        assert counts.total == 2 and counts.tp == 1 and counts.fn == 1

    def test_argmax_tie_goes_to_sleep(self):
        probs = np.array([[0.5, 0.5], [0.4, 0.6], [0.6, 0.4]])
        assert predicted_labels(probs).tolist() == [0, 1, 0]


class TestMetrics:
    def test_perfect_agreement_all_ones(self):
        vals = metrics(ConfusionCounts(tp=5, fn=0, fp=0, tn=5))
        assert vals.acc == 1.0 and vals.se == 1.0 and vals.sp == 1.0
        assert vals.ppv == 1.0 and vals.npv == 1.0 and vals.kappa == 1.0

    def test_one_class_prediction_balanced_truth_kappa_zero(self):
        vals = metrics(ConfusionCounts(tp=0, fn=10, fp=0, tn=10))
        assert vals.kappa == 0.0

    def test_worked_example(self):
        vals = metrics(ConfusionCounts(tp=40, fn=10, fp=5, tn=45))
        assert abs(vals.acc - 0.85) < 1e-12
        assert abs(vals.se - 0.80) < 1e-12
        assert abs(vals.sp - 0.90) < 1e-12
        assert abs(vals.ppv - 8.0 / 9.0) < 1e-12
        assert abs(vals.npv - 45.0 / 55.0) < 1e-12
        assert abs(vals.kappa - 0.70) < 1e-12

    def test_undefined_ratios_marked(self):
        vals = metrics(ConfusionCounts(tp=0, fn=0, fp=2, tn=8))
        assert vals.se is None           # no wake epochs in truth
        assert vals.kappa is not None
        assert "se" in vals.undefined()

    def test_kappa_one_iff_no_errors(self):
        vals = metrics(ConfusionCounts(tp=3, fn=0, fp=0, tn=7))
        assert vals.kappa == 1.0
        vals = metrics(ConfusionCounts(tp=3, fn=1, fp=0, tn=6))
        assert vals.kappa < 1.0

    def test_kappa_single_class_agreement_undefined(self):
        vals = metrics(ConfusionCounts(tp=10, fn=0, fp=0, tn=0))
        assert vals.kappa is None

    def test_zero_total_rejected(self):
        with pytest.raises(ContractError):
            metrics(ConfusionCounts())

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_kappa_symmetric_under_class_swap(self, seed):
        rng = np.random.default_rng(seed)
        tp, fn, fp, tn = (int(v) for v in rng.integers(0, 30, size=4))
        if tp + fn + fp + tn == 0:
            tp = 1
        a = metrics(ConfusionCounts(tp=tp, fn=fn, fp=fp, tn=tn)).kappa
        b = metrics(ConfusionCounts(tp=tn, fn=fp, fp=fn, tn=tp)).kappa
        if a is None:
            assert b is None
        else:
            assert abs(a - b) < 1e-12

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        pred = rng.integers(0, 2, size=n)
        true = rng.integers(0, 2, size=n)
        order = rng.permutation(n)
        assert confusion(pred, true) == confusion(pred[order], true[order])


class TestReport:
    def test_single_patient_average_equals_row(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 2, size=30)
        true = rng.integers(0, 2, size=30)
        report = report_from_predictions([("p1", pred, true)])
        assert report.average.to_dict() == report.patients[0].metrics.to_dict()

    def test_two_patient_kappa_average(self):
        perfect = np.array([0, 1, 0, 1])
        report = report_from_predictions(
            [
                ("good", perfect, perfect),
                ("coin", np.array([0, 0, 0, 0]), np.array([0, 1, 0, 1])),
            ]
        )
        assert report.patients[0].metrics.kappa == 1.0
        assert report.patients[1].metrics.kappa == 0.0
        assert report.average.kappa == 0.5

    def test_undefined_metrics_excluded_from_average(self):
        all_sleep = np.zeros(4, dtype=int)
        mixed = np.array([0, 1, 1, 0])
        report = report_from_predictions(
            [("nosleep", all_sleep, all_sleep), ("mixed", mixed, mixed)]
        )
        # first patient has no wake epochs: se/ppv undefined there
        assert report.patients[0].metrics.se is None
        assert report.average.se == 1.0

    def test_pooled_differs_from_average_in_general(self):
        r1 = (np.array([1, 1, 1, 1]), np.array([1, 1, 1, 0]))
        r2 = (np.array([0]), np.array([0]))
        report = report_from_predictions([("a", *r1), ("b", *r2)])
        pooled_acc = report.pooled.acc
        avg_acc = report.average.acc
        assert abs(pooled_acc - avg_acc) > 1e-6
        assert report.pooled_counts.total == 5

    def test_identical_patients_make_average_equal_pooled(self):
        pred = np.array([1, 0, 1, 0])
        true = np.array([1, 0, 0, 0])
        report = report_from_predictions([("a", pred, true), ("b", pred, true)])
        for name in ("acc", "se", "sp", "ppv", "npv", "kappa"):
            a = getattr(report.average, name)
            p = getattr(report.pooled, name)
            assert a == pytest.approx(p, abs=1e-12)

    def test_json_round_trip(self):
        rng = np.random.default_rng(2)
        rows = [
            (f"s{i}", rng.integers(0, 2, size=20), rng.integers(0, 2, size=20))
            for i in range(3)
        ]
        report = report_from_predictions(rows, metadata={"seed": 7})
        back = MetricsReport.from_json(report.to_json())
        assert back.to_dict() == report.to_dict()

    def test_evaluate_records_runs_inference(self):
        records = synthesize_dataset(
            3, seed=8, config=GeneratorConfig(epochs_min=30, epochs_max=40)
        )
        stats = compute_stats(records)
        stager = SleepStager(ModelConfig(**TINY), seed=0)
        report = evaluate_records(stager, records, stats)
        assert len(report.patients) == 3
        assert report.pooled_counts.total == sum(r.n_epochs for r in records)

    def test_worker_limit_respects_environment(self, monkeypatch):
        monkeypatch.delenv("SOMNOFLOW_THREADS", raising=False)
        assert worker_limit(8) == 1
        monkeypatch.setenv("SOMNOFLOW_THREADS", "4")
        assert worker_limit(8) == 4
        assert worker_limit(2) == 2
        assert worker_limit() == 4

    def test_threaded_evaluation_matches_sequential(self, monkeypatch):
        records = synthesize_dataset(
            4, seed=9, config=GeneratorConfig(epochs_min=30, epochs_max=40)
        )
        stats = compute_stats(records)
        stager = SleepStager(ModelConfig(**TINY), seed=1)
        monkeypatch.delenv("SOMNOFLOW_THREADS", raising=False)
        sequential = evaluate_records(stager, records, stats)
        monkeypatch.setenv("SOMNOFLOW_THREADS", "4")
        threaded = evaluate_records(stager, records, stats)
        assert sequential.to_dict() == threaded.to_dict()


class TestAttentionMaps:
    def _stager_and_record(self):
        records = synthesize_dataset(
            1, seed=10, config=GeneratorConfig(epochs_min=30, epochs_max=30)
        )
        stats = compute_stats(records)
        stager = SleepStager(ModelConfig(**TINY), seed=2)
        return stager, records[0], stats

    def test_rows_sum_to_one(self):
        stager, record, stats = self._stager_and_record()
        maps = extract_attention(stager, record, stats)
        assert len(maps) == 2
        for amap in maps:
            sums = amap.matrix.sum(axis=1)
            assert np.max(np.abs(sums - 1.0)) < 1e-6
            assert amap.matrix.min() >= 0.0 and amap.matrix.max() <= 1.0

    def test_single_epoch_record(self):
        records = synthesize_dataset(
            1, seed=11, config=GeneratorConfig(epochs_min=1, epochs_max=1)
        )
        stats = compute_stats(records)
        stager = SleepStager(ModelConfig(**TINY), seed=2)
        maps = extract_attention(stager, records[0], stats)
        for amap in maps:
            assert amap.matrix.shape == (1, 1)
            assert abs(amap.matrix[0, 0] - 1.0) < 1e-12

    def test_csv_export_header_comment(self, tmp_path):
        amap = AttentionMap(layer=1, matrix=np.array([[1.0]]), subject_id="s")
        path = tmp_path / "att.csv"
        export_attention_csv(amap, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# layer=1 epochs=1")
        assert lines[1] == "row,col,value"


class TestHypnogramExport:
    def test_evaluating_exported_files_matches_direct_report(self, tmp_path):
        from somnoflow.evaluation import evaluate_hypnogram_files

        rng = np.random.default_rng(12)
        rows = []
        paths = {}
        for i in range(3):
            pred = rng.integers(0, 2, size=15)
            true = rng.integers(0, 2, size=15)
            rows.append((f"s{i}", pred, true))
            path = tmp_path / f"s{i}.csv"
            export_hypnogram(pred, true, path)
            paths[f"s{i}"] = path
        direct = report_from_predictions(rows)
        from_files = evaluate_hypnogram_files(paths)
        assert direct.to_dict() == from_files.to_dict()

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 2, size=12)
        truth = rng.integers(0, 2, size=12)
        path = tmp_path / "h.csv"
        export_hypnogram(pred, truth, path)
        back_pred, back_truth = load_hypnogram(path)
        assert np.array_equal(back_pred, pred)
        assert np.array_equal(back_truth, truth)

    def test_header_and_symbols(self, tmp_path):
        path = tmp_path / "h.csv"
        export_hypnogram(np.array([0, 1]), np.array([1, 0]), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,pred,truth"
        for line in lines[1:]:
            _, p, t = line.split(",")
            assert p in ("W", "S") and t in ("W", "S")
