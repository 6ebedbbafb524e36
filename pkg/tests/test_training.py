import math
from dataclasses import replace

import numpy as np
import pytest

from ehybrid.data import Dataset, generate_texture_dataset
from ehybrid.diffcore.checkpoint import encode_checkpoint
from ehybrid.diffcore.tensor import Tensor
from ehybrid.errors import ConfigError
from ehybrid.network import build_default_spec
from ehybrid.scattering import ScatteringCache
from ehybrid.training import (SGD, TrainConfig, average_precision, build_model, cosine_lr, mean_average_precision,
                              read_final, run_ablation_suite, run_subsample_sweep, subsample_dataset, train,
                              train_and_evaluate, write_final, write_report)


def brute_force_ap(scores, positives):
    """Walk the ranked list one cutoff at a time and sum (R_i - R_{i-1}) * P_i."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(positives)
    area, prev_recall, tp = 0.0, 0.0, 0
    for cutoff, i in enumerate(ranked, start=1):
        tp += positives[i]
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / cutoff)
        prev_recall = recall
    return area


def brute_force_map(scores, labels):
    aps = []
    for k in range(scores.shape[1]):
        pos = [int(y == k) for y in labels]
        if any(pos):
            aps.append(brute_force_ap(list(scores[:, k]), pos))
    return sum(aps) / len(aps)


# --- scheduler and optimizer -----------------------------------------------

def test_cosine_trivial_points():
    cfg = TrainConfig(epochs=10, lr0=0.1, lr_min=0.01)
    assert cosine_lr(0, cfg) == pytest.approx(0.1, abs=1e-15)
    assert cosine_lr(10, cfg) == pytest.approx(0.01, abs=1e-15)
    assert cosine_lr(5, cfg) == pytest.approx(0.055, abs=1e-15)


def test_lr_trace_matches_closed_form():
    train_set, _ = tiny_data()
    cfg = TrainConfig(epochs=4, batch_size=8, lr0=0.05, lr_min=0.001)
    report = train(build_model(tiny_spec(), 0, "baseline"), train_set, cfg, arm="baseline")
    for t, lr in enumerate(report.lr):
        assert abs(lr - (0.001 + 0.5 * 0.049 * (1 + math.cos(math.pi * t / 4)))) <= 1e-12


def test_sgd_quadratic_step():
    w = Tensor(np.array([0.0]), requires_grad=True)
    w.grad = w.data - 3.0  # d/dw of (w - 3)^2 / 2
    SGD([w], momentum=0.0).step(0.1)
    assert w.data[0] == pytest.approx(0.3, abs=1e-15)


def test_sgd_momentum_and_decay():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([w], momentum=0.5, weight_decay=0.1)
    w.grad = np.array([1.0])
    opt.step(1.0)  # d = 1.1, v = 1.1
    assert w.data[0] == pytest.approx(-0.1)
    w.grad = np.array([0.0])
    opt.step(1.0)  # d = -0.01, v = 0.55 - 0.01
    assert w.data[0] == pytest.approx(-0.64)


def test_config_validation():
    for kwargs in ({"epochs": 0}, {"subsample_fraction": 0.0}, {"subsample_fraction": 1.5},
                   {"batch_size": 1}, {"momentum": 1.0}, {"ablation": "both"}, {"lr0": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


# --- mAP -------------------------------------------------------------------

def test_hand_case_five_sixths():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)
    assert brute_force_ap([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)


def test_map_agrees_with_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        m, k = int(rng.integers(1, 21)), int(rng.integers(1, 6))
        labels = rng.integers(0, k, m)
        # coarse scores so that ties are common
        scores = rng.integers(0, 4, (m, k)) / 4.0 if rng.random() < 0.5 else rng.random((m, k))
        got, per_class, excluded = mean_average_precision(scores, labels)
        worst = max(worst, abs(got - brute_force_map(scores, labels)))
        assert excluded == [c for c in range(k) if not (labels == c).any()]
        assert all(ap is None or 0 <= ap <= 1 for ap in per_class)
    assert worst <= 1e-12


def test_perfect_ranking():
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert mean_average_precision(np.eye(3)[labels], labels)[0] == 1.0


def test_ties_keep_sample_order():
    # identical scores: the ranking is the sample order
    assert average_precision(np.zeros(4), [0, 1, 0, 1]) == pytest.approx((1 / 2 + 2 / 4) / 2, abs=1e-15)
    assert average_precision(np.zeros(4), [1, 0, 0, 0]) == 1.0


def test_classes_without_positives_are_excluded():
    scores = np.random.default_rng(0).random((4, 3))
    m, per_class, excluded = mean_average_precision(scores, np.array([0, 0, 2, 2]))
    assert excluded == [1] and per_class[1] is None
    assert m == pytest.approx((per_class[0] + per_class[2]) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        mean_average_precision(np.zeros((2, 2)), np.array([5, 5]))
    with pytest.raises(ValueError):
        mean_average_precision(np.zeros((3, 2)), np.array([0, 1]))


# --- subsampling -----------------------------------------------------------

def toy_dataset(n):
    return Dataset(np.zeros((n, 1, 2, 2), np.float32), np.arange(n) % 3, ["a", "b", "c"])


def test_subsample_sizes_and_determinism():
    ds = toy_dataset(1000)
    assert subsample_dataset(ds, 1.0, 0) is ds
    half = subsample_dataset(ds, 0.5, 7)
    assert len(half) == 500
    assert len(subsample_dataset(ds, 0.25, 7)) == 250
    assert len(subsample_dataset(toy_dataset(1001), 0.5, 0)) == 500
    again = subsample_dataset(ds, 0.5, 7)
    assert np.array_equal(half.images, again.images) and np.array_equal(half.labels, again.labels)
    assert not np.array_equal(half.labels, subsample_dataset(ds, 0.5, 8).labels)


def test_subsample_keeps_original_order_and_errors():
    ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.zeros(10, int), ["a"])
    kept = subsample_dataset(ds, 0.5, 0).images.ravel()
    assert np.all(np.diff(kept) > 0)
    with pytest.raises(ConfigError):
        subsample_dataset(ds, 0.05, 0)
    with pytest.raises(ConfigError):
        subsample_dataset(ds, 0.0, 0)


# --- short training runs -----------------------------------------------------

def tiny_spec():
    return build_default_spec(32, num_classes=3)


def tiny_data():
    return generate_texture_dataset(3, 10, 32, seed=5)


def test_zero_learning_rate_leaves_parameters_unchanged():
    train_set, _ = tiny_data()
    model = build_model(tiny_spec(), 0, "hybrid")
    before = {n: t.data.copy() for n, t in model.param_store().trainable().items()}
    train(model, train_set, TrainConfig(epochs=2, batch_size=8, lr0=0.0))
    after = model.param_store().trainable()
    assert all(np.array_equal(before[n], after[n].data) for n in before)


def test_training_is_bit_exact_across_runs():
    train_set, test_set = tiny_data()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    m1, r1 = train_and_evaluate(tiny_spec(), train_set, test_set, cfg)
    m2, r2 = train_and_evaluate(tiny_spec(), train_set, test_set, cfg)
    assert r1 == r2
    assert encode_checkpoint(m1.param_store()) == encode_checkpoint(m2.param_store())
    _, r3 = train_and_evaluate(tiny_spec(), train_set, test_set, replace(cfg, seed=4))
    assert r3.train_loss != r1.train_loss


def test_scat_disabled_probe_is_zero_every_epoch():
    train_set, test_set = tiny_data()
    _, report = train_and_evaluate(tiny_spec(), train_set, test_set, TrainConfig(epochs=3, batch_size=8),
                                   arm="scat_disabled")
    assert report.scat_grad_max == [0.0, 0.0, 0.0]


def test_arm_errors():
    with pytest.raises(ConfigError):
        build_model(tiny_spec(), 0, "shuffled")
    with pytest.raises(ConfigError):
        train(build_model(build_default_spec(32, num_classes=4), 0), tiny_data()[0], TrainConfig(epochs=1))


def test_ablation_suite_structure(tmp_path):
    train_set, test_set = tiny_data()
    cache = ScatteringCache()
    rep = run_ablation_suite(tiny_spec(), train_set, test_set, TrainConfig(epochs=1, batch_size=8),
                             seeds=[0], cache=cache)
    assert [r[0] for r in rep.rows] == ["hybrid", "scat_disabled", "net_disabled", "baseline"]
    assert set(rep.deltas) == {"scat_disabled", "net_disabled", "baseline"}
    assert rep.deltas["baseline"] == rep.means["baseline"] - rep.means["hybrid"]
    # train and test scattering are each computed once per J
    assert len(cache) == 4
    write_report(tmp_path, rep.reports[("hybrid", 0)])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.csv", "per_class_ap.csv", "summary.csv"]


def test_sweep_grid_and_final_round_trip(tmp_path):
    train_set, test_set = generate_texture_dataset(3, 20, 32, seed=1)
    rep = run_subsample_sweep(tiny_spec(), train_set, test_set, TrainConfig(epochs=1, batch_size=8))
    labels = [r[0] for r in rep.rows]
    assert labels == ["hybrid@1", "baseline@1", "hybrid@0.5", "baseline@0.5", "hybrid@0.25", "baseline@0.25"]
    rows = [(label, m) for label, _, m in rep.rows]
    write_final(tmp_path / "final.csv", rows)
    assert read_final(tmp_path / "final.csv") == rows
