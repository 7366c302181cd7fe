import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modedec.estimator import IRCNNDecomposer
from modedec.exceptions import InvalidInputError
from modedec.model import Model, ModelConfig


@pytest.fixture(scope="module")
def data():
    t = np.linspace(0, 6, 40)
    ks = range(5, 12)
    X = np.stack([np.cos(k * np.pi * t) + np.cos((k + 1.5) * np.pi * t) for k in ks])
    Y = np.stack([[np.cos((k + 1.5) * np.pi * t), np.cos(k * np.pi * t)] for k in ks])
    return X, Y


@pytest.fixture(scope="module")
def fitted(data):
    X, Y = data
    return IRCNNDecomposer(S=1, K=8, epochs=2, batch_size=3, lr=1e-2).fit(X, Y)


def test_params_round_trip():
    est = IRCNNDecomposer(K=16, lr=0.5)
    params = est.get_params()
    assert params["K"] == 16 and params["lr"] == 0.5
    assert clone(est).get_params() == params
    est.set_params(S=4)
    assert est.S == 4


def test_transform_shapes(fitted, data):
    X, _ = data
    out = fitted.transform(X)
    assert out.shape == (7, 3, 40)
    np.testing.assert_allclose(out.sum(axis=1), X, atol=1e-12)
    assert fitted.predict(X).shape == (7, 2, 40)
    assert fitted.n_features_in_ == 40
    assert fitted.history_.n_epochs == 2


def test_score_is_negative_mae(fitted, data):
    X, Y = data
    pred = fitted.predict(X)
    assert fitted.score(X, Y) == pytest.approx(-np.mean(np.abs(pred - Y)), rel=1e-12)


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        IRCNNDecomposer().transform(data[0])


@pytest.mark.parametrize("Y_shape", [(7, 3, 40), (6, 2, 40), (7, 2, 39)])
def test_rejects_bad_labels(data, Y_shape):
    X, _ = data
    with pytest.raises(InvalidInputError):
        IRCNNDecomposer(K=8, epochs=1).fit(X, np.zeros(Y_shape))


def test_rejects_non_finite_input(fitted, data):
    X = data[0].copy()
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        fitted.transform(X)


def test_rejects_short_signals(fitted):
    with pytest.raises(InvalidInputError):
        fitted.transform(np.zeros((2, 5)))


def test_too_few_samples(data):
    X, Y = data
    with pytest.raises(ValueError):
        IRCNNDecomposer(K=8, epochs=1).fit(X[:4], Y[:4])


def test_single_component_labels(data):
    X, Y = data
    est = IRCNNDecomposer(n_components=1, S=1, K=8, epochs=1).fit(X, Y[:, 0, :])
    assert est.transform(X).shape == (7, 2, 40)


def test_fit_transform(data):
    X, Y = data
    out = IRCNNDecomposer(S=1, K=8, epochs=1).fit_transform(X, Y)
    assert out.shape == (7, 3, 40)


def test_from_model(data):
    model = Model(ModelConfig(M=2, S=1, K=8, d_att=4), seed=0)
    est = IRCNNDecomposer.from_model(model)
    assert est.variant == "ircnn_plus" and est.K == 8
    np.testing.assert_array_equal(est.transform(data[0][:1])[0], model.decompose(data[0][0]).as_array())
