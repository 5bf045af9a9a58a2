import numpy as np
import pytest

from cilab.analysis import (
    AnalysisConfig,
    StageReport,
    accuracy,
    analyze_run,
    avg_incremental_accuracy,
    delta_metric,
    feature_shift_export,
    paired_shift,
    perturb_stage_inputs,
    retrain_classifier_full,
    shift_stage,
)
from cilab.cil import run_algorithm
from cilab.errors import ConfigError, IntegrityError, ParameterError, ProtocolError
from cilab.nn import CosineClassifier, FeatureExtractor, LinearClassifier, Model, Schedule
from cilab.numeric import RngStream

from conftest import tiny_bench, tiny_hyper

FAST = AnalysisConfig(retrain=Schedule(3, batch_size=32), cka_batch=16, cka_passes=2, tsne_iterations=150,
                      tsne_perplexity=5.0, shift_classes=3, shift_per_class=5)


class Constant:
    def __init__(self, c, k):
        self.c, self.k = c, k

    def logits(self, x):
        z = np.zeros((len(x), self.k))
        z[:, self.c] = 1.0
        return z


def test_accuracy_examples():
    x = np.zeros((10, 2))
    assert accuracy(Constant(2, 4), x, np.full(10, 2)) == 100.0
    with pytest.raises(ParameterError):
        accuracy(Constant(0, 2), x[:0], np.array([], int))


def test_random_head_is_near_chance():
    accs = []
    for seed in range(10):
        r = RngStream(seed)
        x = r.normal(size=(1000, 8))
        y = np.repeat(np.arange(10), 100)
        accs.append(accuracy(Model(FeatureExtractor.build(8, r, 1, 8, 8, 1), LinearClassifier.build(10, 8, r.derive(1))), x, y))
    assert all(abs(a - 10.0) <= 3.0 for a in accs)


def test_accuracy_partition_identity():
    bench = tiny_bench()
    model = run_algorithm(bench, "naive", tiny_hyper(), RngStream(0), stages=1).snapshots[0]
    total = accuracy(model, bench.x_val, bench.y_val)
    parts = [(accuracy(model, bench.x_val[r], bench.y_val[r]), len(r)) for r in bench.split.val_indices]
    weighted = sum(a * n for a, n in parts) / sum(n for _, n in parts)
    assert abs(total - weighted) < 1e-9


def test_delta_examples():
    assert delta_metric([60, 60, 60]) == [0, 0, 0]
    assert abs(delta_metric([60.4, 52.2])[1] - (-8.2)) < 1e-12
    with pytest.raises(ProtocolError):
        delta_metric([])
    with pytest.raises(ProtocolError):
        delta_metric([StageReport(1, 50.0, [])])


def test_stage_report_range():
    with pytest.raises(ParameterError):
        StageReport(0, 101.0, [])
    with pytest.raises(ParameterError):
        StageReport(0, 50.0, [-1.0])


def test_retrain_is_deterministic_and_all_class():
    bench = tiny_bench()
    ext = FeatureExtractor.build(bench.dim, RngStream(0), 2, 10, 6, 1)
    a = retrain_classifier_full(ext, bench, Schedule(3, batch_size=32), RngStream(1))
    b = retrain_classifier_full(ext.copy(), bench, Schedule(3, batch_size=32), RngStream(1))
    assert isinstance(a.head, CosineClassifier) and a.head.num_classes == bench.num_classes
    assert accuracy(a, bench.x_val, bench.y_val) == accuracy(b, bench.x_val, bench.y_val)
    lin = retrain_classifier_full(ext, bench, Schedule(1, batch_size=32), RngStream(1), head_type="linear")
    assert isinstance(lin.head, LinearClassifier)
    with pytest.raises(IntegrityError):
        retrain_classifier_full(ext, bench, Schedule(1), RngStream(1), expected_digest="0" * 64)


def test_avg_incremental_accuracy_single_stage():
    bench = tiny_bench()
    state = run_algorithm(bench, "naive", tiny_hyper(), RngStream(2), stages=1)
    only = state.snapshots[0]
    rows = bench.split.val_indices[0]
    assert avg_incremental_accuracy(state, bench) == accuracy(only, bench.x_val[rows], bench.y_val[rows])


def test_feature_shift_export_shape_and_pairs():
    bench = tiny_bench(classes=10, base=5, steps=5)
    ext = FeatureExtractor.build(bench.dim, RngStream(0), 2, 10, 6, 1)
    stage = shift_stage(bench, 5)
    assert stage == 0
    feats, labels, src = feature_shift_export(ext, ext, bench, stage, RngStream(1), 5, 20)
    assert feats.shape == (200, 6) and len(labels) == 200
    assert (src == "A").sum() == 100
    assert paired_shift(feats, src) == 0.0
    other = FeatureExtractor.build(bench.dim, RngStream(9), 2, 10, 6, 1)
    feats, _, src = feature_shift_export(ext, other, bench, stage, RngStream(1), 5, 20)
    assert paired_shift(feats, src) > 0
    # a one-class stage clamps the class count
    f1, _, _ = feature_shift_export(ext, ext, bench, 3, RngStream(1), 5, 20)
    assert f1.shape[0] == 40


def test_perturbations():
    bench = tiny_bench(per_class=2000, classes=4, base=1, steps=3)
    same = perturb_stage_inputs(bench, [("gaussian_noise", 0.0)] * 3, RngStream(0))
    assert np.array_equal(same.x_train, bench.x_train)
    noisy = perturb_stage_inputs(bench, [("gaussian_noise", 0.5), ("contrast", 0.5), ("blur", 0.5)], RngStream(0))
    r0 = bench.split.train_indices[0]
    assert np.array_equal(noisy.x_train[r0], bench.x_train[r0])
    r1 = bench.split.train_indices[1]
    rows = r1[:2000]
    gain = noisy.x_train[rows].var(axis=0) - bench.x_train[rows].var(axis=0)
    assert abs(gain.mean() - 0.25) < 0.025
    with pytest.raises(ConfigError):
        perturb_stage_inputs(bench, [("blur", 0.5)], RngStream(0))
    with pytest.raises(ConfigError):
        perturb_stage_inputs(bench, [("swirl", 0.5)] * 3, RngStream(0))


def test_analyze_run_exploit_signature():
    bench = tiny_bench(classes=10, base=5, steps=5)
    state = run_algorithm(bench, "exploit", tiny_hyper(), RngStream(3))
    result = analyze_run(state, bench, FAST)
    assert [r.delta for r in result.reports] == [0.0] * 6
    assert all(abs(v - 1) < 1e-10 for _, v in result.cka_curve)
    assert result.tsne["shift"] == 0.0
    assert result.tsne["kl_final"] < result.tsne["kl_initial"]
    assert result.reports[-1].avg_inc_acc is not None


def test_analyze_run_never_mutates_extractors():
    bench = tiny_bench()
    state = run_algorithm(bench, "der", tiny_hyper(), RngStream(4))
    before = list(state.extractor_digests)
    result = analyze_run(state, bench, FAST, with_tsne=False)
    assert [s.extractor.digest() for s in state.snapshots] == before
    assert result.reports[0].delta == 0.0
    assert result.subset_matrix.shape == (4, 4)
