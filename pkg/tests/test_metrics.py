import numpy as np
import pytest

from metrics import accuracy, balanced_accuracy, class_weights, majority_rate, mean_std


def test_accuracy_counts_matches():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    assert accuracy([], []) == 0.0
    with pytest.raises(ValueError, match="shape"):
        accuracy([0, 1], [0])


def test_balanced_accuracy_averages_class_recall():
    labels = np.array([0, 0, 0, 1])
    assert balanced_accuracy(np.zeros(4, dtype=int), labels) == 0.5
    assert balanced_accuracy(labels, labels) == 1.0
    assert balanced_accuracy(np.array([1, 1]), np.array([1, 1])) == 1.0


def test_class_weights_inverse_frequency_mean_one():
    weights = class_weights(np.array([0, 0, 0, 1]))
    assert weights.mean() == pytest.approx(1.0)
    assert weights[1] / weights[0] == pytest.approx(3.0)
    np.testing.assert_allclose(class_weights(np.array([0, 1])), [1.0, 1.0])
    np.testing.assert_allclose(class_weights(np.array([0, 0])), [1.0, 1.0])


def test_majority_rate_and_mean_std():
    assert majority_rate([0, 0, 1, 0]) == 0.75
    assert mean_std([0.5]) == (0.5, 0.0)
    mean, std = mean_std([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert std == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mean_std([])
