import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from paralm.estimators import AdapterEstimator
from paralm.training import make_task


@pytest.fixture(scope="module")
def data():
    t = make_task("shift_k", n_train=48, n_dev=8, n_test=8, prompt_len=4, alphabet=10, seed=1)
    X = np.array([p for p, _ in t.train])
    y = np.array([q for _, q in t.train])
    return X, y


def test_params_and_clone(tiny):
    est = AdapterEstimator(backbone=tiny, method="lora", rank=4)
    p = est.get_params()
    assert p["method"] == "lora" and p["rank"] == 4
    c = clone(est)
    assert c.get_params()["rank"] == 4 and c is not est
    est.set_params(rank=2)
    assert est.rank == 2


def test_not_fitted(tiny, data):
    with pytest.raises(NotFittedError):
        AdapterEstimator(backbone=tiny).predict(data[0])


@pytest.mark.parametrize("method", ["para", "ia3", "lora"])
def test_fit_predict_transform(tiny, data, method):
    X, y = data
    est = AdapterEstimator(backbone=tiny, method=method, max_epochs=1, batch_size=8).fit(X, y)
    pred = est.predict(X[:5])
    assert pred.shape == (5, y.shape[1])
    assert 0.0 <= est.score(X[:5], y[:5]) <= 1.0
    assert est.history_[0]["step"] == 0
    if method == "lora":
        with pytest.raises(ValueError):
            est.transform(X[:3])
    else:
        v = est.transform(X[:3])
        c = tiny.config
        assert v.shape == (3, c.n_layers * (2 * c.d_model + c.d_ffn))


def test_input_validation(tiny, data):
    X, y = data
    with pytest.raises(ValueError):
        AdapterEstimator(backbone=tiny).fit(X, y[:-1])
    with pytest.raises(ValueError):
        AdapterEstimator(backbone=tiny).fit(X + 100, y)
    with pytest.raises(ValueError):
        AdapterEstimator().fit(X, y)
