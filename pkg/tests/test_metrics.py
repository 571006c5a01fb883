import numpy as np
import pytest

from sparse_nls.metrics import (
    MetricError,
    ReplicationSet,
    bias,
    bias_variance,
    selection_frequency,
    vaf,
    variance,
    variance_improvement,
)

# per-subject variance improvements (percent) and their average
SUBJECT_IMPROVEMENTS = [69.25, 65.79, 74.83, 89.36, 87.44, 65.02, 53.62, 77.70, 63.44, 67.62]
SUBJECT_AVERAGE = 71.41


def test_vaf_examples():
    y = np.array([1.0, -2.0, 3.0])
    assert vaf(y, y) == 100.0
    assert vaf(y, np.zeros(3)) == 0.0
    assert vaf([1.0, 2.0], [1.0, 1.0]) == pytest.approx(80.0, abs=1e-12)
    assert vaf([1.0, 1.0], [5.0, 5.0]) < 0


def test_vaf_errors():
    with pytest.raises(MetricError):
        vaf([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(MetricError):
        vaf([1.0, 2.0], [1.0])


def test_vaf_concatenation_identity():
    rng = np.random.default_rng(0)
    y, yh = rng.normal(size=50), rng.normal(size=50)
    y2, yh2 = np.r_[y, np.zeros(10)], np.r_[yh, np.zeros(10)]
    expected = (1 - np.sum((y2 - yh2) ** 2) / np.sum(y2 ** 2)) * 100
    assert vaf(y2, yh2) == pytest.approx(expected, rel=1e-14)
    assert vaf(y2, yh2) == pytest.approx(vaf(y, yh), rel=1e-14)


def test_bias_variance_examples():
    reps = ReplicationSet(np.tile([0.3, -0.1], (4, 1)), np.array([0.3, -0.1]))
    b, v = bias_variance(reps)
    np.testing.assert_array_equal(b, 0.0)
    np.testing.assert_array_equal(v, 0.0)

    reps = ReplicationSet(np.array([[0.0], [1.0]]), np.array([0.5]))
    assert bias(reps)[0] == 0.0
    assert variance(reps)[0] == 0.5

    with pytest.raises(MetricError):
        variance(ReplicationSet(np.array([[1.0, 2.0]])))
    with pytest.raises(MetricError):
        bias(ReplicationSet(np.array([[1.0], [2.0]])))


def test_bias_variance_permutation_invariant():
    rng = np.random.default_rng(1)
    est = rng.normal(size=(30, 4))
    truth = rng.normal(size=4)
    a = bias_variance(ReplicationSet(est, truth))
    b = bias_variance(ReplicationSet(est[rng.permutation(30)], truth))
    np.testing.assert_allclose(a.bias, b.bias, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(a.variance, b.variance, rtol=1e-13)


def test_variance_improvement():
    rng = np.random.default_rng(2)
    est = rng.normal(size=(20, 3))
    x = ReplicationSet(est)
    assert variance_improvement(x, x) == 0.0
    half = ReplicationSet(est / np.sqrt(2))
    assert variance_improvement(half, x) == pytest.approx(50.0, abs=1e-10)
    with pytest.raises(MetricError):
        variance_improvement(x, ReplicationSet(np.ones((5, 3))))
    with pytest.raises(MetricError):
        variance_improvement(x, ReplicationSet(est[:, :2]))


def test_subject_improvement_fixture_average():
    assert np.mean(SUBJECT_IMPROVEMENTS) == pytest.approx(SUBJECT_AVERAGE, abs=0.005)


def test_replication_set_validation():
    with pytest.raises(MetricError):
        ReplicationSet(np.ones((3, 2)), np.ones(3))
    with pytest.raises(MetricError):
        ReplicationSet(np.ones((3, 2)), labels=("a",))
    assert ReplicationSet(np.ones((3, 2))).labels == ("p0", "p1")


def test_selection_frequency_order():
    subsets = [["b", "a"], ["a", "b"], ["c"], ["a", "c"], ["c"]]
    freq = selection_frequency(subsets)
    assert freq[0] == (("a", "b"), 2)
    assert freq[1] == (("c",), 2)
    assert freq[2] == (("a", "c"), 1)
