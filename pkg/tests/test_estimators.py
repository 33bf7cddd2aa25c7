import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ecoprune.diffusion import SyntheticLatents
from ecoprune.estimators import DiffusionPruner, LatentDiffusionModel

SMALL = dict(d_model=8, n_heads=2, d_ff=6, n_blocks=2, seq_len=3, n_conditions=3, T=4,
             n_steps=20, batch_size=8)


@pytest.fixture(scope="module")
def fitted():
    data = SyntheticLatents(3, 3, 8, seed=0)
    X, y = data.sample(40, np.random.default_rng(0))
    return LatentDiffusionModel(**SMALL, random_state=1).fit(X, y), X, y


def test_params_round_trip_and_clone():
    est = LatentDiffusionModel(**SMALL)
    assert est.get_params()["d_ff"] == 6
    est.set_params(learning_rate=1e-2)
    assert clone(est).get_params() == est.get_params()
    pr = DiffusionPruner(est, sparsity=0.3)
    assert pr.get_params(deep=False)["sparsity"] == 0.3
    assert "estimator__d_ff" in pr.get_params(deep=True)


def test_fit_accepts_flat_latents_and_is_reproducible(fitted):
    est, X, y = fitted
    flat = LatentDiffusionModel(**SMALL, random_state=1).fit(X.reshape(len(X), -1), y)
    assert np.array_equal(flat.loss_curve_, est.loss_curve_)
    assert len(est.loss_curve_) == SMALL["n_steps"]


@pytest.mark.parametrize("X,y", [
    (np.zeros((4, 3, 7)), np.zeros(4, int)),
    (np.zeros((4, 3, 8)), np.zeros(3, int)),
    (np.zeros((4, 3, 8)), np.full(4, 3)),
    (np.zeros((4, 3, 8)), np.full(4, 0.5)),
    (np.zeros((0, 3, 8)), np.zeros(0, int)),
    (np.full((2, 3, 8), np.nan), np.zeros(2, int)),
])
def test_fit_validation(X, y):
    with pytest.raises(ValueError):
        LatentDiffusionModel(**SMALL).fit(X, y)


def test_predict_requires_fit_and_returns_latents(fitted):
    with pytest.raises(NotFittedError):
        LatentDiffusionModel(**SMALL).predict([0])
    est, _, _ = fitted
    out = est.predict([0, 1, 2, 2])
    assert out.shape == (4, 3, 8)
    assert np.array_equal(out, est.predict([0, 1, 2, 2]))
    z = np.random.default_rng(3).standard_normal((2, 3, 8))
    assert est.predict([1, 1], z_T=z).shape == (2, 3, 8)
    assert est.n_params_ > 0


def test_pruner_zero_sparsity_reproduces_base(fitted):
    est, _, _ = fitted
    pr = DiffusionPruner(est, sparsity=0.0, steps=2, random_state=0).fit([0, 1, 2])
    z = np.random.default_rng(4).standard_normal((3, 3, 8))
    assert np.abs(pr.transform([0, 1, 2], z_T=z) - est.predict([0, 1, 2], z_T=z)).max() <= 1e-12
    s = pr.summary()
    assert s["params_pruned"] == s["params_base"] and s["achieved_sparsity"] == 0.0


def test_pruner_fit_produces_smaller_model(fitted):
    est, _, _ = fitted
    pr = DiffusionPruner(est, sparsity=0.5, threshold_mode="local", beta_reg=0.05, steps=3,
                       random_state=0).fit([1])
    assert pr.lambda_.shape == (2 * (2 + 6),)
    assert len(pr.report_) == 3
    s = pr.summary()
    assert s["params_pruned"] < s["params_base"] and s["flops_pruned"] < s["flops_base"]
    assert pr.get_mask(sparsity=0.0).achieved_sparsity == 0.0
    assert pr.transform([0, 2]).shape == (2, 3, 8)


def test_pruner_errors(fitted):
    est, _, _ = fitted
    with pytest.raises(ValueError):
        DiffusionPruner(None).fit([0])
    with pytest.raises(NotFittedError):
        DiffusionPruner(LatentDiffusionModel(**SMALL)).fit([0])
    with pytest.raises(ValueError):
        DiffusionPruner(est, steps=1).fit([])
    with pytest.raises(NotFittedError):
        DiffusionPruner(est).transform([0])
