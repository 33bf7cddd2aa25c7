"""scikit-learn style wrappers around the denoiser and the mask learner.

``LatentDiffusionModel`` fits a toy conditional denoiser on latents;
``DiffusionPruner`` learns a structural mask for a fitted model and exposes
the compacted model through ``transform``-style calls.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .compactor import compact_model, count_params, estimate_flops
from .denoiser import DenoiserConfig, init_denoiser
from .diffusion import SamplerMode, base_train_step, full_sample, make_schedule
from .gates import GateConfig, gate_groups, threshold_mask
from .optim import Adam
from .pruning import PruneConfig, learn_mask


def _check_latents(X, seq_len, d_model):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == seq_len * d_model:
        X = X.reshape(len(X), seq_len, d_model)
    if X.ndim != 3 or X.shape[1:] != (seq_len, d_model):
        raise ValueError(f"expected latents of shape (n, {seq_len}, {d_model}) or "
                         f"(n, {seq_len * d_model}), got {X.shape}")
    return X


def _check_conditions(y, n_conditions):
    y = column_or_1d(np.asarray(y), warn=True)
    if y.dtype.kind not in "iu":
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("condition ids must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_conditions):
        raise ValueError(f"condition ids must lie in [0, {n_conditions})")
    return y


class LatentDiffusionModel(BaseEstimator):
    """Conditional toy latent diffusion model.

    ``fit(X, y)`` trains the noise predictor on clean latents ``X`` with
    class labels ``y``; ``predict(y)`` runs the reverse process from fresh
    noise and returns final latents.
    """

    def __init__(self, d_model=16, n_heads=4, d_ff=32, n_blocks=3, seq_len=4,
                 n_conditions=8, T=8, n_steps=2000, batch_size=32, learning_rate=3e-3,
                 random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_blocks = n_blocks
        self.seq_len = seq_len
        self.n_conditions = n_conditions
        self.T = T
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _config(self):
        return DenoiserConfig(self.d_model, self.n_heads, self.d_ff, self.n_blocks,
                              self.seq_len, self.n_conditions, self.T)

    def fit(self, X, y):
        config = self._config()
        X = _check_latents(X, self.seq_len, self.d_model)
        y = _check_conditions(y, self.n_conditions)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if len(X) == 0:
            raise ValueError("empty training set")
        self.model_ = init_denoiser(config, self.random_state)
        self.schedule_ = make_schedule(self.T)
        rng = np.random.default_rng(self.random_state)
        opt = Adam(self.learning_rate)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            self.loss_curve_.append(
                base_train_step(X[idx], y[idx], self.model_, self.schedule_, opt, rng))
        return self

    def predict(self, y, z_T=None, random_state=None, sampler="deterministic"):
        """Final latents for condition ids ``y``; shape (n, seq_len, d_model)."""
        check_is_fitted(self, "model_")
        y = _check_conditions(y, self.n_conditions)
        if z_T is None:
            rng = np.random.default_rng(self.random_state if random_state is None else random_state)
            z_T = rng.standard_normal((len(y), self.seq_len, self.d_model))
        else:
            z_T = _check_latents(z_T, self.seq_len, self.d_model)
        mode = SamplerMode(sampler, 0 if random_state is None else random_state)
        return np.asarray(full_sample(z_T, y, self.model_, self.schedule_, None, mode))

    @property
    def n_params_(self) -> int:
        check_is_fitted(self, "model_")
        return count_params(self.model_)


class DiffusionPruner(TransformerMixin, BaseEstimator):
    """Learn head/neuron mask logits for a fitted ``LatentDiffusionModel``.

    ``fit(X)`` takes the condition ids used as mask-learning data.
    ``transform(X)`` samples final latents for condition ids ``X`` with the
    compacted model, so the pruned generator slots in wherever the base
    model's ``predict`` was used.
    """

    def __init__(self, estimator=None, sparsity=0.2, threshold_mode="global", beta_reg=0.5,
                 lr_attn=0.15, lr_ffn=0.15, steps=400, batch_size=4, weight_decay=1e-2,
                 engine="checkpointed", delta=0.5, alpha_temp=1.0, zeta=1.1, gamma=-0.1,
                 stochastic_gates=True, random_state=0):
        self.estimator = estimator
        self.sparsity = sparsity
        self.threshold_mode = threshold_mode
        self.beta_reg = beta_reg
        self.lr_attn = lr_attn
        self.lr_ffn = lr_ffn
        self.steps = steps
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.engine = engine
        self.delta = delta
        self.alpha_temp = alpha_temp
        self.zeta = zeta
        self.gamma = gamma
        self.stochastic_gates = stochastic_gates
        self.random_state = random_state

    def _base(self):
        if self.estimator is None:
            raise ValueError("DiffusionPruner needs a fitted LatentDiffusionModel as estimator")
        check_is_fitted(self.estimator, "model_")
        return self.estimator

    def fit(self, X, y=None):
        base = self._base()
        conditions = _check_conditions(X, base.n_conditions)
        if conditions.size == 0:
            raise ValueError("at least one condition id is required")
        cfg = PruneConfig(self.beta_reg, self.lr_attn, self.lr_ffn, self.steps,
                          self.batch_size, self.weight_decay, self.engine, base.T,
                          self.stochastic_gates)
        gate_cfg = GateConfig(self.alpha_temp, self.zeta, self.gamma, self.delta)
        self.lambda_, self.report_ = learn_mask(base.model_, np.unique(conditions), cfg,
                                                gate_cfg, base.schedule_, self.random_state)
        c = base.model_.config
        self.groups_ = gate_groups(c.n_blocks, c.n_heads, c.d_ff)
        self.mask_ = self.get_mask()
        self.pruned_model_ = compact_model(base.model_, self.mask_)
        return self

    def get_mask(self, sparsity=None, mode=None):
        check_is_fitted(self, "lambda_")
        return threshold_mask(self.lambda_, self.sparsity if sparsity is None else sparsity,
                              mode or self.threshold_mode, self.groups_)

    def transform(self, X, z_T=None, random_state=None):
        check_is_fitted(self, "pruned_model_")
        base = self._base()
        y = _check_conditions(X, base.n_conditions)
        if z_T is None:
            rng = np.random.default_rng(base.random_state if random_state is None else random_state)
            z_T = rng.standard_normal((len(y), base.seq_len, base.d_model))
        else:
            z_T = _check_latents(z_T, base.seq_len, base.d_model)
        return np.asarray(full_sample(z_T, y, self.pruned_model_, base.schedule_))

    def summary(self) -> dict:
        check_is_fitted(self, "pruned_model_")
        base = self._base()
        return {"params_base": count_params(base.model_),
                "params_pruned": count_params(self.pruned_model_),
                "flops_base": estimate_flops(base.model_, base.T),
                "flops_pruned": estimate_flops(self.pruned_model_, base.T),
                "achieved_sparsity": self.mask_.achieved_sparsity}
