import json

import numpy as np
import pytest

from lrvd.models import (
    build_model,
    frozen_weight,
    make_cluster_classification_task,
    make_lowrank_regression_task,
    make_task,
    model_spec_for_task,
)
from lrvd.numerics import Rng, svd


def nearest_mean_accuracy(task):
    # linear probe: classify by the closest empirical class mean
    classes = np.arange(task.params["n_classes"])
    means = np.stack([task.x_train[task.y_train == c].mean(axis=0) for c in classes])
    scores = task.x_test @ means.T - 0.5 * np.sum(means**2, axis=1)
    return float(np.mean(scores.argmax(axis=1) == task.y_test))


def test_regression_teacher_rank_zero():
    task = make_lowrank_regression_task(r_star=0, noise_std=0.0, n_train=16, n_test=8)
    assert np.all(task.teacher_update == 0)
    w0 = frozen_weight(task.params["backbone_seed"], 0, 32, 32)
    assert np.allclose(task.y_train, task.x_train @ w0.T, atol=1e-12)


def test_regression_teacher_spectrum():
    task = make_lowrank_regression_task(r_star=3, spectrum=[3.0, 2.0, 1.0], n_train=8, n_test=8)
    sigma = svd(task.teacher_update).sigma
    assert np.allclose(sigma[:3], [3, 2, 1], atol=1e-10)
    assert np.all(sigma[3:] < 1e-10)


def test_regression_default_spectrum_is_linear():
    assert make_lowrank_regression_task(r_star=4, n_train=4, n_test=4).params["spectrum"] == [4.0, 3.0, 2.0, 1.0]


def test_regression_errors():
    with pytest.raises(ValueError, match="infeasible"):
        make_lowrank_regression_task(d_in=4, d_out=4, r_star=5)
    with pytest.raises(ValueError):
        make_lowrank_regression_task(r_star=2, spectrum=[1.0, 2.0])
    with pytest.raises(ValueError):
        make_lowrank_regression_task(r_star=2, spectrum=[1.0, -1.0])


def test_tasks_reproducible():
    a = make_lowrank_regression_task(noise_std=0.0, n_train=32, n_test=16, seed=3)
    b = make_lowrank_regression_task(noise_std=0.0, n_train=32, n_test=16, seed=3)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    c = make_cluster_classification_task(label_noise=0.1, seed=5)
    d = make_cluster_classification_task(label_noise=0.1, seed=5)
    assert np.array_equal(c.x_train, d.x_train) and np.array_equal(c.y_train, d.y_train)
    assert not np.array_equal(c.x_train, make_cluster_classification_task(label_noise=0.1, seed=6).x_train)


def test_task_export_holds_parameters_only():
    task = make_lowrank_regression_task(n_train=8, n_test=8)
    obj = task.to_json()
    assert obj["kind"] == "regression" and obj["r_star"] == 3
    assert len(json.dumps(obj)) < 1000
    again = make_task(obj)
    assert np.array_equal(again.x_train, task.x_train)


def test_separable_clusters_probe_is_perfect():
    task = make_cluster_classification_task(separation=50.0, label_noise=0.0)
    assert nearest_mean_accuracy(task) == 1.0


def test_label_noise_caps_accuracy_near_nine_tenths():
    task = make_cluster_classification_task(separation=50.0, label_noise=0.2, n_train=2048, n_test=8192)
    assert abs(nearest_mean_accuracy(task) - 0.9) < 0.015


def test_classification_errors():
    with pytest.raises(ValueError):
        make_cluster_classification_task(n_classes=1)
    with pytest.raises(ValueError):
        make_cluster_classification_task(label_noise=1.5)


def test_linear_backbone_parameter_count():
    model = build_model({"kind": "regression", "d_in": 32, "d_out": 24, "r_init": 16})
    head = 24  # trainable output bias
    assert model.trainable_parameter_count() == 16 * (32 + 24) + 16 + head
    assert len(model.adapters) == 1


def test_mlp_has_two_independent_adapters():
    model = build_model({"kind": "classification", "d_in": 8, "hidden": 12, "n_classes": 3, "r_init": 4})
    (i0, a0), (i1, a1) = model.adapters
    assert (a0.d_in, a0.d_out) == (8, 12) and (a1.d_in, a1.d_out) == (12, 12)
    a0.log_alpha[0] = 1.0
    assert a1.log_alpha[0] == -8.0
    assert not np.array_equal(a0.mu_A[:, :8], a1.mu_A[:, :8])


def test_adapters_disabled_matches_frozen_oracle(rng):
    model = build_model({"kind": "classification", "d_in": 6, "hidden": 10, "n_classes": 2, "adapters": "none"})
    x = rng.standard_normal((5, 6))
    h = x
    for layer in model.layers:
        h = np.maximum(h @ layer.weight.T, 0.0)
    oracle = h @ model.head_weight.T + model.head_bias
    assert np.array_equal(model.forward(x), oracle)


def test_all_adapters_pruned_equals_frozen_plus_head(rng):
    model = build_model({"kind": "classification", "d_in": 6, "hidden": 10, "n_classes": 2, "r_init": 3})
    for _, a in model.adapters:
        a.mu_B = rng.standard_normal(a.mu_B.shape)
        a.active_mask[:] = False
    model.head_bias = rng.standard_normal(2)
    x = rng.standard_normal((4, 6))
    frozen = model.forward(x, "frozen")
    assert np.array_equal(model.forward(x, "deterministic"), frozen)
    assert np.array_equal(model.forward(x, "direct", Rng(1)), frozen)


def test_build_model_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        build_model({"kind": "regression", "bogus": 1})
    with pytest.raises(ValueError):
        build_model({"kind": "regression", "r_init": 0})
    with pytest.raises(ValueError):
        build_model({"kind": "mystery"})


def test_model_matches_task_backbone():
    task = make_lowrank_regression_task(n_train=8, n_test=8, seed=4)
    model = build_model(model_spec_for_task(task))
    assert np.array_equal(model.layers[0].weight, frozen_weight(4, 0, 32, 32))


def test_model_json_round_trip_bit_exact(rng):
    model = build_model({"kind": "classification", "d_in": 6, "hidden": 10, "n_classes": 3, "r_init": 3})
    for _, a in model.adapters:
        a.mu_B = rng.standard_normal(a.mu_B.shape)
        a.log_alpha = rng.generator.uniform(-9, 7, size=3)
    model.adapters[0][1].active_mask[1] = False
    again = type(model).from_json(json.loads(json.dumps(model.to_json())))
    x = rng.standard_normal((4, 6))
    assert np.array_equal(model.forward(x), again.forward(x))
    assert again.adapters[0][1].active_mask.tolist() == [True, False, True]
