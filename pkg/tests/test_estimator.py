import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from selective_ssm.constructions import build_keep_nth
from selective_ssm.estimator import SelectiveSSMClassifier, check_mask, check_targets, check_tokens
from selective_ssm.tasks import TaskConfig, make_dataset, stack


def keep_data(count=120, T=6, V=4, n=1, seed=0):
    return stack(make_dataset(TaskConfig("keep_nth", T=T, vocab_size=V, n=n, seed=seed), count, "train"))


def test_get_params_and_clone():
    est = SelectiveSSMClassifier(kind="s4d", d=8, epochs=3)
    params = est.get_params()
    assert params["kind"] == "s4d" and params["d"] == 8 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(N=2)
    assert est.N == 2


def test_fit_predict_score():
    X, Y, M = keep_data()
    est = SelectiveSSMClassifier(d=6, N=2, epochs=3, batch_size=16, seed=1)
    assert est.fit(X, Y, M) is est
    pred = est.predict(X)
    assert pred.shape == X.shape
    proba = est.predict_proba(X)
    assert np.allclose(proba.sum(axis=-1), 1.0)
    assert 0.0 <= est.score(X, Y, M) <= 1.0
    assert est.record_.epochs_run == 3
    assert list(est.classes_) == list(range(5))


def test_wrapped_construction_scores_perfectly():
    X, Y, M = stack(make_dataset(TaskConfig("keep_nth", T=30, vocab_size=20, n=5), 50))
    est = SelectiveSSMClassifier.from_block(build_keep_nth(5, 30, 20))
    assert est.score(X, Y, M) == 1.0


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        SelectiveSSMClassifier().predict(np.ones((2, 3), dtype=int))


def test_token_validation():
    assert check_tokens([[1, 2], [3, 0]]).dtype == np.int64
    assert check_tokens(np.array([[1.0, 2.0]])).tolist() == [[1, 2]]
    with pytest.raises(ValueError):
        check_tokens([[1.5, 2.0]])
    with pytest.raises(ValueError):
        check_tokens([[-1, 2]])
    with pytest.raises(ValueError):
        check_tokens([[1, 9]], vocab=5)
    with pytest.raises(ValueError):
        check_tokens([1, 2, 3])
    with pytest.raises(ValueError):
        check_tokens([[np.nan, 1.0]])


def test_target_and_mask_validation():
    with pytest.raises(ValueError):
        check_targets([[1, 2, 3]], (1, 2))
    assert check_mask(None, (2, 3)).all()
    assert check_mask([[0, 1]], (1, 2)).tolist() == [[False, True]]
    with pytest.raises(ValueError):
        check_mask([[0, 2]], (1, 2))
    with pytest.raises(ValueError):
        check_mask([[True]], (1, 2))


def test_fit_argument_errors():
    X, Y, M = keep_data(count=10)
    with pytest.raises(ValueError):
        SelectiveSSMClassifier(val_fraction=0.0, epochs=1).fit(X, Y, M)
    with pytest.raises(ValueError):
        SelectiveSSMClassifier(n_classes=2, epochs=1).fit(X, Y, M)
    with pytest.raises(ValueError):
        SelectiveSSMClassifier(epochs=1).fit(X[:1], Y[:1], M[:1])
    est = SelectiveSSMClassifier(d=4, N=2, epochs=1)
    est.fit(X, Y, M)
    with pytest.raises(ValueError):
        est.score(X, Y, np.zeros_like(M))
