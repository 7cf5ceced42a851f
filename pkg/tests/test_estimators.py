import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from momentflow.estimators import ColoraRegressor

SMALL = dict(width=8, n_layers=2, rank=2, hyper_width=8, epochs=2, batch_size=64,
             mc_samples=2)


def rows(n_snap=4, n_x=16):
    x = np.linspace(-1, 1, n_x)
    X, y = [], []
    for t in np.linspace(0, 0.2, n_snap):
        for mu in (0.01, 0.05):
            X.append(np.column_stack([np.full(n_x, t), np.full(n_x, mu), x]))
            y.append(np.exp(-t) * np.sin(np.pi * x))
    return np.vstack(X), np.concatenate(y)


def test_params_round_trip():
    est = ColoraRegressor(**SMALL)
    assert est.get_params()["rank"] == 2
    c = clone(est).set_params(seed=3)
    assert c.seed == 3 and est.seed == 0


def test_fit_predict_shapes():
    X, y = rows()
    est = ColoraRegressor(**SMALL).fit(X, y)
    assert est.predict(X).shape == y.shape
    mean, std = est.predict_moments(X[:5])
    assert mean.shape == (5, est.model_.p)
    assert np.all(std > 0)
    assert len(est.history_) == 2


def test_fit_is_reproducible():
    X, y = rows()
    a = ColoraRegressor(**SMALL).fit(X, y).predict(X)
    b = ColoraRegressor(**SMALL).fit(X, y).predict(X)
    assert_allclose(a, b, rtol=0, atol=0)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        ColoraRegressor().predict(np.zeros((2, 3)))


def test_column_checks():
    X, y = rows()
    with pytest.raises(ValueError):
        ColoraRegressor(**SMALL).fit(X[:, :2], y)
    est = ColoraRegressor(**SMALL).fit(X, y)
    with pytest.raises(ValueError, match="columns"):
        est.predict(np.zeros((2, 4)))
