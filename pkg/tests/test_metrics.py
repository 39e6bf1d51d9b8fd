import math

import numpy as np
import pytest

from flextrees.metrics import auc, evaluate, mse, poisson_deviance


def test_mse():
    y = np.array([1.0, -2.0, 3.5])
    assert mse(y, y) == 0.0
    assert mse(y + 1, y) == 1.0
    assert mse([1.0, 2.0], [0.0, 4.0]) == 2.5


def test_poisson_deviance():
    assert poisson_deviance([1.0, 3.0], [1.0, 3.0]) == 0.0
    assert poisson_deviance([1.0], [0.0]) == 2.0
    assert poisson_deviance([1.0], [2.0]) == pytest.approx(2 * (2 * math.log(2) - 1), abs=1e-12)
    assert poisson_deviance([1.0, 1.0], [0.0, 2.0], weights=[1.0, 0.0]) == 2.0
    with pytest.raises(ValueError):
        poisson_deviance([0.0], [1.0])


def test_deviance_non_negative(rng):
    mu = rng.uniform(0.1, 5, size=200)
    y = rng.poisson(2.0, size=200).astype(float)
    assert poisson_deviance(mu, y) >= 0


def test_auc():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 4, [0, 1, 0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert math.isnan(auc([0.1, 0.2], [1, 1]))


def test_auc_monotone_invariance(rng):
    s, lab = rng.normal(size=100), (rng.random(100) < 0.4).astype(float)
    assert auc(s, lab) == auc(np.exp(3 * s) + 1, lab)


def test_masked_rows_do_not_change_metrics(rng):
    y = rng.poisson(2.0, size=50).astype(float)
    mu = rng.uniform(0.5, 4, size=50)
    mask = np.ones(50, bool)
    y2, mu2 = np.append(y, [100.0, 0.0]), np.append(mu, [1e-3, 50.0])
    mask2 = np.append(mask, [False, False])
    assert mse(mu, y) == mse(mu2, y2, mask2)
    assert poisson_deviance(mu, y) == poisson_deviance(mu2, y2, mask2)
    lab = (y > 1).astype(float)
    assert auc(mu, lab) == auc(mu2, np.append(lab, [1.0, 0.0]), mask2)


def test_evaluate_report():
    mean = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 1.0]])
    y = np.array([[0.0, 2.0], [2.0, 0.0], [4.0, np.nan]])
    mask = ~np.isnan(y)
    report = evaluate("poisson", mean, y, mask, ["a", "b"])
    assert report.observed == [3, 2]
    assert set(report.values) == {"mse", "poisson_deviance", "auc_nonzero"}
    assert report.values["auc_nonzero"][1] == 1.0
    assert report.lines()[0] == "task.a.observed: 3"
