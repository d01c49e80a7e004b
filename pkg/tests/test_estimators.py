import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from camfprint import SignatureNetwork, SimilarityNetwork


def _images():
    rng = np.random.default_rng(0)
    X = np.concatenate([
        np.clip(rng.normal(60, 8, (6, 16, 16, 3)), 0, 255),
        np.clip(rng.normal(180, 8, (6, 16, 16, 3)), 0, 255),
    ]).astype(np.uint8)
    y = np.array(["A_0"] * 6 + ["B_0"] * 6)
    return X, y


def test_signature_network_params_and_clone():
    est = SignatureNetwork(input_size=(16, 16), epochs=2, stop_epoch=1)
    params = est.get_params()
    assert params["input_size"] == (16, 16) and params["stop_epoch"] == 1
    c = clone(est)
    assert c.get_params() == params and c is not est


def test_signature_network_fit_transform_predict():
    X, y = _images()
    est = SignatureNetwork(input_size=(16, 16), epochs=4, stop_epoch=4, batch_size=4,
                           learning_rate=0.01)
    with pytest.raises(NotFittedError):
        est.transform(X)
    est.fit(X, y, X, y)
    S = est.transform(X)
    assert S.shape == (12, 1024) and np.abs(S).max() <= 1
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-6)
    assert set(est.predict(X)) <= {"A_0", "B_0"}
    assert len(est.history_) == 4 and len(est.extractor_version_) == 64


def test_signature_network_needs_two_classes():
    X, _ = _images()
    with pytest.raises(ValueError):
        SignatureNetwork(input_size=(16, 16)).fit(X, ["A_0"] * 12)


def _pairs(n, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    A = np.tanh(rng.standard_normal((n, dim)))
    same = rng.random(n) < 0.5
    B = np.where(same[:, None], A + 0.05 * rng.standard_normal((n, dim)), np.tanh(rng.standard_normal((n, dim))))
    return np.stack([A, B], axis=1).astype(np.float32), same.astype(int)


def test_similarity_network_fit_predict():
    X, y = _pairs(200)
    Xv, yv = _pairs(60, seed=1)
    est = SimilarityNetwork(hidden_units=8, epochs=20, learning_rate=0.05, momentum=0.9,
                            lr_decay_every=10, random_state=3)
    est.fit(X, y, Xv, yv)
    assert est.threshold_ in est.grid
    assert est.selection_f1_ > 0.8
    scores = est.decision_function(Xv)
    assert scores.shape == (60,) and np.all((scores >= 0) & (scores <= 1))
    np.testing.assert_array_equal(est.predict(Xv), (scores >= est.threshold_).astype(int))
    assert est.predict_proba(Xv).shape == (60, 2)
    assert est.score(Xv, yv) > 0.8


def test_similarity_network_clone_and_default_threshold():
    X, y = _pairs(40)
    est = clone(SimilarityNetwork(hidden_units=4, epochs=1))
    est.fit(X, y)
    assert est.threshold_ == 0.5 and est.selection_f1_ is None


def test_similarity_network_bad_input():
    est = SimilarityNetwork(epochs=1)
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 3, 8)), [0, 1, 0, 1])
    X, _ = _pairs(4)
    with pytest.raises(ValueError):
        est.fit(X, [0, 1, 2, 1])
