import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fozo.estimator import FOZOAdapter
from fozo.losses import estimate_source_stats
from fozo.streams import DomainSpec, TaskSpec, corrupt, generate_source

TASK = TaskSpec(n_classes=3, input_dim=3, n_patches=4)


@pytest.fixture
def data():
    x, y = generate_source(TASK, 64, 0)
    xt, yt = generate_source(TASK, 32, 1)
    return x, corrupt(xt, DomainSpec("contrast-shift", 5), 2), yt


def test_get_params_and_clone(small_model):
    est = FOZOAdapter(model=small_model, eta=0.05, random_state=3)
    params = est.get_params()
    assert params["eta"] == 0.05 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params()["eta"] == 0.05 and not hasattr(twin, "session_")
    est.set_params(n_spsa=2)
    assert est.n_spsa == 2


def test_not_fitted(small_model, data):
    with pytest.raises(NotFittedError):
        FOZOAdapter(model=small_model).predict(data[1])


def test_fit_adapt_predict(small_model, data):
    x, xt, yt = data
    est = FOZOAdapter(model=small_model, n_prompts=2, eps0=0.5).fit(x)
    P0 = est.prompts_
    preds = est.adapt_predict(xt[:16], yt[:16])
    assert preds.shape == (16,)
    assert not np.array_equal(P0, est.prompts_)
    assert est.history_[0].fp_count == 2
    proba = est.predict_proba(xt)
    assert proba.shape == (32, 3) and np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(est.predict(xt), proba.argmax(axis=1))
    assert est.partial_fit(xt[16:]) is est
    assert len(est.history_) == 2
    assert est.history_[1].acc is None


def test_predict_does_not_adapt(small_model, data):
    x, xt, _ = data
    est = FOZOAdapter(model=small_model).fit(x)
    P0 = est.prompts_
    est.predict(xt)
    assert np.array_equal(P0, est.prompts_)


def test_flat_inputs_accepted(small_model, data):
    x, xt, _ = data
    est = FOZOAdapter(model=small_model).fit(x.reshape(64, -1))
    assert est.adapt_predict(xt.reshape(32, -1)).shape == (32,)


def test_precomputed_stats_and_determinism(small_model, data):
    x, xt, _ = data
    stats = estimate_source_stats(small_model, [x])
    a = FOZOAdapter(model=small_model, source_stats=stats, random_state=1).fit(x[:1])
    b = FOZOAdapter(model=small_model, random_state=1, batch_size=64).fit(x)
    assert np.array_equal(a.adapt_predict(xt), b.adapt_predict(xt))
    assert np.array_equal(a.prompts_, b.prompts_)


def test_validation_errors(small_model, data):
    x, xt, _ = data
    with pytest.raises(ValueError):
        FOZOAdapter().fit(x)
    with pytest.raises(ValueError):
        FOZOAdapter(model=small_model).fit(x[:, :, :2])
    with pytest.raises(TypeError):
        FOZOAdapter(model=small_model, source_stats={"mu": 0}).fit(x)
    bad = xt.copy()
    bad[0, 0, 0] = np.nan
    est = FOZOAdapter(model=small_model).fit(x)
    with pytest.raises(ValueError):
        est.adapt_predict(bad)
