"""Benchmark construction and the five-strategy comparison harness."""

import numpy as np
import pytest

from metd.data import EmbeddingDataset, Sample, SynthConfig, generate_synthetic
from metd.errors import ContractViolation
from metd.harness import (
    STRATEGY_KINDS,
    HarnessSettings,
    Strategy,
    build_strategy_model,
    compare_all,
    default_benchmark,
    distorted_benchmark,
    distortion_matrix,
    format_comparison,
    run_strategy,
)
from metd.inference import evaluate, temporal_mean_pool
from metd.training import StageConfig

SMALL = SynthConfig(
    n_classes=3,
    subclusters_per_class=1,
    samples_per_subcluster=50,
    feature_dim=16,
    sigma=0.1,
    inter_class_min_angle=60.0,
    seed=11,
)

COMPACT = HarnessSettings(
    stage1=StageConfig.stage_one(epochs=3, batch_size=16),
    stage2=StageConfig.stage_two(epochs=3, batch_size=16),
    probe_epochs=5,
)


@pytest.fixture(scope="module")
def small_splits():
    return generate_synthetic(SMALL)


def test_default_benchmark_structure(clean_benchmark):
    train, test = clean_benchmark
    assert train.feature_dim == 16 and test.feature_dim == 16
    np.testing.assert_array_equal(train.unit_class_counts(), [200, 200, 200])
    np.testing.assert_array_equal(test.unit_class_counts(), [50, 50, 50])
    for label in range(3):
        subs = {s.subcluster_id for s in train.samples if s.label == label}
        assert subs == {0, 1}
        # the two subcluster means of each class point well apart
        rows = [
            np.vstack([s.features for s in train.samples
                       if s.label == label and s.subcluster_id == sub]).mean(axis=0)
            for sub in (0, 1)
        ]
        cos = rows[0] @ rows[1] / (np.linalg.norm(rows[0]) * np.linalg.norm(rows[1]))
        assert np.degrees(np.arccos(cos)) >= 120.0
        # 4:1 majority/minority imbalance survives the 80/20 split
        counts = [
            sum(1 for s in train.samples
                if s.label == label and s.subcluster_id == sub)
            for sub in (0, 1)
        ]
        assert counts == [160, 40]


def test_default_benchmark_is_deterministic():
    a_train, _ = default_benchmark(seed=3)
    b_train, _ = default_benchmark(seed=3)
    c_train, _ = default_benchmark(seed=4)
    for a, b in zip(a_train.samples, b_train.samples):
        assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a_train.samples[0].features, c_train.samples[0].features)


def test_distortion_matrix_properties():
    matrix = distortion_matrix(16, seed=5, min_scale=0.4, max_scale=2.5)
    assert matrix.shape == (16, 16)
    np.testing.assert_allclose(np.linalg.cond(matrix), 2.5 / 0.4, rtol=1e-9)
    assert np.array_equal(matrix, distortion_matrix(16, seed=5, min_scale=0.4,
                                                    max_scale=2.5))
    with pytest.raises(ContractViolation):
        distortion_matrix(0)
    with pytest.raises(ContractViolation):
        distortion_matrix(4, min_scale=0.0)
    with pytest.raises(ContractViolation):
        distortion_matrix(4, min_scale=2.0, max_scale=1.0)


def test_distorted_benchmark_applies_the_fixed_map(clean_benchmark):
    clean_train, clean_test = clean_benchmark
    dist_train, dist_test = distorted_benchmark(seed=7)
    matrix = distortion_matrix(16)
    for clean, distorted in ((clean_train, dist_train), (clean_test, dist_test)):
        assert len(clean) == len(distorted)
        for a, b in zip(clean.samples, distorted.samples):
            assert np.array_equal(b.features, matrix @ np.asarray(a.features))
            assert (a.label, a.subcluster_id) == (b.label, b.subcluster_id)


def test_strategy_validation():
    with pytest.raises(ContractViolation):
        Strategy(kind="prompt-tuning")
    with pytest.raises(ContractViolation):
        Strategy(kind="metd", n_subclasses=0)
    with pytest.raises(ContractViolation):
        Strategy(kind="metd", n_tokens=-1)
    assert Strategy(kind="metd", n_subclasses=3).n_subclasses == 3


def test_harness_settings_validation():
    with pytest.raises(ContractViolation):
        HarnessSettings(stage1=StageConfig.stage_two())
    with pytest.raises(ContractViolation):
        HarnessSettings(probe_epochs=0)
    with pytest.raises(ContractViolation):
        HarnessSettings(probe_lr=0.0)


def test_identical_descriptors_score_at_chance(clean_benchmark):
    # With every class holding the same descriptor, all logits tie and
    # accuracy collapses to chance level on the balanced test split.
    train, test = clean_benchmark
    settings = HarnessSettings()
    model = build_strategy_model(train, settings, seed=7, n_subclasses=1,
                                 n_tokens=settings.n_tokens)
    for i in range(1, model.n_classes):
        model.bank.tokens[i] = model.bank.tokens[0]
        model.bank.context[i] = model.bank.context[0]
    war = evaluate(test, model).war
    assert abs(war - 1.0 / 3.0) <= 0.1


def test_zero_shot_strategy_reports_the_untrained_model(small_splits):
    row = run_strategy(Strategy(kind="zero-shot-fixed"), small_splits, seed=3,
                       settings=COMPACT)
    assert row.kind == "zero-shot-fixed"
    assert row.echo == {"seed": "3", "K": "1", "M": "4"}
    train, test = small_splits
    fresh = build_strategy_model(train, COMPACT, seed=3, n_subclasses=1, n_tokens=4)
    report = evaluate(test, fresh)
    assert row.war == report.war and row.uar == report.uar


def test_linear_probe_solves_a_separable_benchmark(small_splits):
    train, test = small_splits
    units = train.units()
    feats = np.vstack([temporal_mean_pool(u.frames) for u in units])
    labels = np.array([u.label for u in units])
    centroids = np.vstack([feats[labels == i].mean(axis=0) for i in range(3)])
    test_units = test.units()
    test_feats = np.vstack([temporal_mean_pool(u.frames) for u in test_units])
    test_labels = np.array([u.label for u in test_units])
    sims = (test_feats / np.linalg.norm(test_feats, axis=1, keepdims=True)) @ (
        centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    ).T
    oracle = float((np.argmax(sims, axis=1) == test_labels).mean())
    assert oracle >= 0.95  # the split is linearly separable to begin with
    row = run_strategy(Strategy(kind="linear-probe"), small_splits, seed=11)
    assert row.war >= 0.95


def test_single_and_duplicate_strategies(small_splits):
    solo = compare_all(small_splits, [Strategy(kind="linear-probe")], seed=2,
                       settings=COMPACT)
    assert len(solo.rows) == 1
    twice = compare_all(
        small_splits,
        [Strategy(kind="linear-probe"), Strategy(kind="linear-probe")],
        seed=2,
        settings=COMPACT,
    )
    assert twice.rows[0].war == twice.rows[1].war
    assert twice.rows[0].uar == twice.rows[1].uar
    assert twice.rows[0].echo == twice.rows[1].echo


def test_all_five_strategies_produce_a_row_each(small_splits):
    strategies = [Strategy(kind=k) for k in STRATEGY_KINDS]
    report = compare_all(small_splits, strategies, seed=4, settings=COMPACT)
    assert [row.kind for row in report.rows] == list(STRATEGY_KINDS)
    for row in report.rows:
        assert 0.0 <= row.war <= 1.0
        assert 0.0 <= row.uar <= 1.0
        assert row.wall_time >= 0.0
        assert row.echo["seed"] == "4"


def test_run_strategy_is_deterministic(small_splits):
    for kind in ("linear-probe", "learnable-context", "metd"):
        a = run_strategy(Strategy(kind=kind), small_splits, seed=6, settings=COMPACT)
        b = run_strategy(Strategy(kind=kind), small_splits, seed=6, settings=COMPACT)
        assert a.war == b.war and a.uar == b.uar and a.echo == b.echo


def test_split_mismatch_is_rejected(small_splits):
    train, _ = small_splits
    other = EmbeddingDataset([Sample(np.ones(4), 0)], feature_dim=4, n_classes=3)
    with pytest.raises(ContractViolation):
        run_strategy(Strategy(kind="linear-probe"), (train, other), seed=0)
    with pytest.raises(ContractViolation):
        compare_all(small_splits, [], seed=0)


def test_format_comparison_layout(small_splits):
    report = compare_all(
        small_splits,
        [Strategy(kind="zero-shot-fixed"), Strategy(kind="linear-probe")],
        seed=1,
        settings=COMPACT,
    )
    text = format_comparison(report)
    lines = text.splitlines()
    assert lines[0].startswith("strategy")
    assert "war" in lines[0] and "uar" in lines[0]
    assert lines[1].startswith("zero-shot-fixed")
    assert lines[2].startswith("linear-probe")
    assert lines[3] == ""
    assert lines[4].startswith("strategy=zero-shot-fixed war=")
    assert "wall_time=" in lines[4]
    assert "seed=1" in lines[4]
    assert len(lines) == 6


def test_descriptor_method_stays_near_the_probe(benchmark_runs, clean_probe_row):
    assert benchmark_runs.report_k2.war >= clean_probe_row.war - 0.02
    assert benchmark_runs.subclasses_k2.purity >= 0.9


def test_two_descriptors_beat_one_on_the_default_benchmark(benchmark_runs):
    assert benchmark_runs.report_k2.war > benchmark_runs.report_k1.war
