"""Noise schedule, forward noising, the reverse step and full sampling."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, backward, ops
from .denoiser import Denoiser, denoiser_forward
from .optim import Adam

DETERMINISTIC = "deterministic"
STOCHASTIC_SHARED = "stochastic_shared"


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if t.dtype.kind not in "iu" or t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise ValueError(f"step index must be an integer in [1, {self.T}], got {t}")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with sigma_t = sqrt(beta_t) and no noise on the last step."""
    if int(T) < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    betas = np.linspace(beta_start, beta_end, int(T))
    alphas = 1.0 - betas
    sigmas = np.sqrt(betas)
    sigmas[0] = 0.0
    return NoiseSchedule(betas, alphas, np.cumprod(alphas), sigmas)


@dataclass(frozen=True)
class SamplerMode:
    """How the per-step noise of the reverse process is chosen.

    ``deterministic`` drops it; ``stochastic_shared`` derives it from
    ``(seed, t)`` so every trajectory run with the same mode sees the same
    sequence.
    """
    kind: str = DETERMINISTIC
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (DETERMINISTIC, STOCHASTIC_SHARED):
            raise ValueError(f"unknown sampler mode {self.kind!r}")

    def eta(self, t: int, shape) -> Optional[np.ndarray]:
        if self.kind == DETERMINISTIC:
            return None
        return np.random.default_rng([self.seed, int(t)]).standard_normal(shape)


def stream_checksum(etas) -> str:
    """Digest of a sequence of noise draws (None entries included)."""
    h = hashlib.sha256()
    for e in etas:
        h.update(b"none" if e is None else np.ascontiguousarray(e, dtype="<f8").tobytes())
    return h.hexdigest()


def _coef(arr: np.ndarray, t) -> np.ndarray | float:
    t = np.asarray(t)
    if t.ndim == 0:
        return float(arr[int(t) - 1])
    return arr[t - 1][:, None, None]


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Sample z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    schedule.check_step(t)
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    abar = _coef(schedule.alpha_bars, t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def denoise_step(z_t, t: int, y, model: Denoiser, schedule: NoiseSchedule, gates=None,
                 eta=None, params=None):
    """One reverse step z_t -> z_{t-1}; differentiable through ``ops``."""
    schedule.check_step(t)
    t = int(t)
    alpha, abar, sigma = (schedule.alphas[t - 1], schedule.alpha_bars[t - 1],
                          schedule.sigmas[t - 1])
    eps_hat = denoiser_forward(model, z_t, t, y, gates, params)
    coef = (1.0 - alpha) / math.sqrt(1.0 - abar)
    out = ops.scale(ops.sub(z_t, ops.scale(eps_hat, coef)), 1.0 / math.sqrt(alpha))
    if sigma > 0.0 and eta is not None:
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape != ops.value_of(z_t).shape:
            raise ValueError(f"eta shape {eta.shape} does not match latent shape")
        out = ops.add(out, sigma * eta)
    return out


def full_sample(z_T, y, model: Denoiser, schedule: NoiseSchedule, gates=None,
                mode: SamplerMode = SamplerMode(), params=None,
                on_step: Optional[Callable] = None):
    """Run the reverse process from t=T down to t=1 and return z_0.

    ``on_step(t, z_prev)`` is called after each step with the new latent.
    """
    if schedule.T > model.config.T:
        raise ValueError(f"schedule has {schedule.T} steps but the model embeds at most "
                         f"{model.config.T}")
    z = z_T
    shape = ops.value_of(z_T).shape
    for t in range(schedule.T, 0, -1):
        z = denoise_step(z, t, y, model, schedule, gates, mode.eta(t, shape), params)
        if on_step is not None:
            on_step(t, z)
    return z


def trajectory_etas(mode: SamplerMode, schedule: NoiseSchedule, shape) -> list:
    """Noise draws ``full_sample`` consumes, in the order it consumes them."""
    return [mode.eta(t, shape) for t in range(schedule.T, 0, -1)]


# -- synthetic data and base training --------------------------------------

@dataclass(frozen=True)
class SyntheticLatents:
    """Class-conditional Gaussian token sequences.

    Class ``k`` has a fixed mean sequence drawn once with scale
    ``mean_scale``; samples add isotropic noise of scale ``spread``.
    """
    n_conditions: int = 8
    seq_len: int = 4
    d_model: int = 16
    mean_scale: float = 0.5
    spread: float = 0.1
    seed: int = 0

    @property
    def means(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xC1A55])
        return rng.normal(0.0, self.mean_scale, size=(self.n_conditions, self.seq_len, self.d_model))

    def sample(self, n: int, rng: np.random.Generator, conditions=None):
        """Return ``(z0, y)`` with z0 of shape (n, L, d) and integer labels y."""
        if conditions is None:
            y = rng.integers(0, self.n_conditions, size=n)
        else:
            y = np.asarray(conditions)[rng.integers(0, len(conditions), size=n)]
        z0 = self.means[y] + self.spread * rng.standard_normal((n, self.seq_len, self.d_model))
        return z0, y


def noise_prediction_loss(model: Denoiser, z0, y, t, eps, schedule: NoiseSchedule, params=None):
    """Mean over the batch of ||eps - eps_theta(z_t, t, y)||^2."""
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = denoiser_forward(model, z_t, t, y, None, params)
    diff = ops.sub(eps, pred)
    return ops.scale(ops.sum(ops.mul(diff, diff)), 1.0 / len(z0))


def base_train_step(z0, y, model: Denoiser, schedule: NoiseSchedule, optimizer: Adam,
                    rng: np.random.Generator) -> float:
    """One Adam step on the noise-prediction loss with all gates open."""
    z0 = np.asarray(z0, dtype=np.float64)
    y = np.asarray(y)
    if len(z0) == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=len(z0))
    eps = rng.standard_normal(z0.shape)
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
    loss = noise_prediction_loss(model, z0, y, t, eps, schedule, leaves)
    value = float(loss.value)
    grads = backward(loss)
    optimizer.step(model.params, grads)
    return value
