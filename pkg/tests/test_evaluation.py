import numpy as np
import pytest

from cd2pfed.evaluation import (MetricRow, ensemble_proba, format_summary, local_accuracy, new_accuracy, summarize,
                                top1)
from cd2pfed.nn import ModelParams, mlp


def _linear(W, b):
    return ModelParams([np.asarray(W, float)], [np.asarray(b, float)])


ARCH = mlp(2, [], 2)


def test_ensemble_of_identical_models_equals_single_model():
    m = _linear([[1.0, -2.0], [0.5, 3.0]], [0.1, -0.1])
    x = np.random.default_rng(0).normal(size=(9, 2))
    single = ensemble_proba([m], ARCH, x)
    assert np.array_equal(ensemble_proba([m, m, m], ARCH, x), single)


def test_complementary_confident_models_ensemble_beats_both():
    # model A is sure about x0 (right) and x1 (wrong, weakly); B the reverse
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    a = _linear([[10.0, 0.0], [0.0, -1.0]], [0.0, 0.0])   # x1 -> class 0 weakly: wrong
    b = _linear([[-1.0, 0.0], [0.0, 10.0]], [0.0, 0.0])   # x0 -> class 1 weakly: wrong
    assert new_accuracy([a], ARCH, x, y) == 50.0
    assert new_accuracy([b], ARCH, x, y) == 50.0
    assert new_accuracy([a, b], ARCH, x, y) == 100.0


def test_ties_go_to_lowest_class():
    assert top1(np.array([[0.5, 0.5]]), np.array([0])) == 100.0


def test_local_accuracy_uses_each_clients_own_model():
    x = np.array([[1.0, 0.0]])
    to0 = _linear([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    to1 = _linear([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.0])
    overall, per = local_accuracy([to0, to1], ARCH, [(x, np.array([0])), (np.repeat(x, 3, 0), np.array([1, 1, 0]))])
    assert per == [100.0, pytest.approx(200 / 3)]
    assert overall == 75.0


def test_metric_row_range_check():
    with pytest.raises(ValueError):
        MetricRow(1, "fedavg", "local", 100.5, 0)


def test_summary_uses_final_round_and_sample_std():
    rows = [MetricRow(r, "fedavg", "local", v, seed) for seed, (v1, v2) in enumerate([(10, 50), (20, 70)])
            for r, v in ((1, v1), (2, v2))]
    rows.append(MetricRow(2, "fedavg", "local", 99.0, 0, client_id=3))
    s = summarize(rows)[("fedavg", "local")]
    assert s["mean"] == 60.0 and s["n"] == 2
    assert s["std"] == pytest.approx(np.std([50, 70], ddof=1))
    assert "fedavg" in format_summary(summarize(rows))
