"""End-to-end mask learning over the whole reverse trajectory.

Two interchangeable engines produce the gradient of the pruning loss with
respect to the mask logits:

* ``naive_backprop`` records all T denoising steps on one tape;
* ``checkpointed_backprop`` keeps only the latent after every step, then
  walks backwards re-running one step at a time on a throwaway tape and
  chaining single-step VJPs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import METER, Tape, backward, ops, vjp_step
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, SamplerMode, denoise_step, full_sample
from .gates import (GateConfig, GateParams, draw_uniforms, expected_gate, gate_groups,
                    per_block, sample_gate)
from .optim import Adam

log = logging.getLogger(__name__)

NAIVE = "naive"
CHECKPOINTED = "checkpointed"


class DivergenceError(RuntimeError):
    """Mask learning loss stayed far above its starting value."""


class CheckpointError(RuntimeError):
    """A latent needed for recomputation is missing from the store."""


@dataclass(frozen=True)
class PruneConfig:
    beta_reg: float = 0.5
    lr_attn: float = 0.15
    lr_ffn: float = 0.15
    steps: int = 400
    batch_size: int = 4
    weight_decay: float = 1e-2
    engine: str = CHECKPOINTED
    T_train: int = 8
    stochastic_gates: bool = True

    def __post_init__(self):
        if self.lr_attn < 0 or self.lr_ffn < 0:
            raise ValueError("learning rates must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.engine not in (NAIVE, CHECKPOINTED):
            raise ValueError(f"engine must be {NAIVE!r} or {CHECKPOINTED!r}, got {self.engine!r}")


class CheckpointStore:
    """Detached latents keyed by step: entry ``t`` is the output of step ``t``."""

    def __init__(self):
        self._latents: dict = {}

    def put(self, t: int, z) -> None:
        self._latents[t] = np.array(ops.value_of(z), dtype=np.float64)

    def get(self, t: int) -> np.ndarray:
        try:
            return self._latents[t]
        except KeyError:
            raise CheckpointError(f"no stored latent for step {t}") from None

    def __len__(self):
        return len(self._latents)

    @property
    def float_count(self) -> int:
        return sum(z.size for z in self._latents.values())

    @property
    def nbytes(self) -> int:
        return sum(z.nbytes for z in self._latents.values())


@dataclass
class GradResult:
    loss: float
    recon: float
    reg: float
    grad: np.ndarray
    peak_floats: int
    store_floats: int = 0


def gate_values(lam, u, cfg: GateConfig):
    """Sampled gates for uniforms ``u``; expected gates when ``u`` is None."""
    if u is None:
        return expected_gate(lam, cfg)
    return sample_gate(lam, u, cfg)


def reconstruction_loss(target, z0_hat):
    """Sum over batch items of the Euclidean distance between final latents."""
    diff = ops.sub(z0_hat, target)
    return ops.sum(ops.l2_norm(diff, axis=(-2, -1)))


def reference_latent(base: Denoiser, z_T, y, schedule: NoiseSchedule,
                     mode: SamplerMode = SamplerMode()) -> np.ndarray:
    """Final latent of the unmasked model; carries no graph."""
    return np.asarray(full_sample(z_T, y, base, schedule, None, mode))


def end_to_end_loss(z_T, y, base: Denoiser, gated: Denoiser, lam, gate_cfg: GateConfig,
                    beta_reg: float, schedule: NoiseSchedule, u=None,
                    mode: SamplerMode = SamplerMode(), groups: Optional[Sequence] = None):
    """Reconstruction distance of the masked trajectory plus ``beta_reg * ||lam||_1``.

    Works on raw arrays (returns a float array) or with ``lam`` as a tape
    ``Var`` (returns a recorded scalar).
    """
    _check_compatible(base, gated)
    if groups is None:
        cfg = gated.config
        groups = gate_groups(cfg.n_blocks, cfg.n_heads, cfg.d_ff)
    target = reference_latent(base, z_T, y, schedule, mode)
    gates = per_block(gate_values(lam, u, gate_cfg), groups)
    z0_hat = full_sample(z_T, y, gated, schedule, gates, mode)
    return ops.add(reconstruction_loss(target, z0_hat),
                   ops.scale(ops.l1_norm(lam), beta_reg))


def _check_compatible(base: Denoiser, gated: Denoiser) -> None:
    if base.config != gated.config:
        raise ValueError("base and gated models have different configurations")
    for k, v in base.params.items():
        if k not in gated.params or gated.params[k].shape != v.shape:
            raise ValueError(f"parameter {k!r} differs in shape between base and gated model")


def naive_backprop(z_T, y, target, model: Denoiser, lam, gate_cfg: GateConfig,
                   beta_reg: float, schedule: NoiseSchedule, u=None,
                   mode: SamplerMode = SamplerMode(), groups: Optional[Sequence] = None) -> GradResult:
    """Gradient with the whole trajectory held on a single tape."""
    groups = groups or _groups(model)
    base_floats = METER.current
    METER.reset_peak()
    tape = Tape()
    lam_var = tape.leaf(lam, name="lambda")
    gates = per_block(gate_values(lam_var, u, gate_cfg), groups)
    z0_hat = full_sample(z_T, y, model, schedule, gates, mode)
    recon = reconstruction_loss(target, z0_hat)
    reg = ops.scale(ops.l1_norm(lam_var), beta_reg)
    loss = ops.add(recon, reg)
    values = float(loss.value), float(recon.value), float(reg.value)
    grad = backward(loss, [lam_var])[0]
    return GradResult(*values, grad, METER.peak - base_floats)


def checkpointed_backprop(z_T, y, target, model: Denoiser, lam, gate_cfg: GateConfig,
                          beta_reg: float, schedule: NoiseSchedule, u=None,
                          mode: SamplerMode = SamplerMode(),
                          groups: Optional[Sequence] = None) -> GradResult:
    """Gradient by per-step recomputation from stored latents."""
    groups = groups or _groups(model)
    lam = np.asarray(lam, dtype=np.float64)
    base_floats = METER.current
    METER.reset_peak()
    shape = np.shape(z_T)
    T = schedule.T

    # forward: no graphs, keep each step's output
    store = CheckpointStore()
    gates = per_block(gate_values(lam, u, gate_cfg), groups)
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(T, 0, -1):
        z = denoise_step(z, t, y, model, schedule, gates, mode.eta(t, shape))
        store.put(t, z)

    # loss and its cotangent at the final latent
    tape = Tape()
    z0_var = tape.leaf(store.get(1))
    recon_var = reconstruction_loss(target, z0_var)
    recon = float(recon_var.value)
    cot = backward(recon_var, [z0_var])[0]
    reg = beta_reg * float(np.abs(lam).sum())

    def step_vjp(t, cotangent):
        z_in = np.asarray(z_T, dtype=np.float64) if t == T else store.get(t + 1)
        eta = mode.eta(t, shape)

        def one_step(z_var, **p):
            g = per_block(gate_values(p["lambda"], u, gate_cfg), groups)
            return denoise_step(z_var, t, y, model, schedule, g, eta)

        (dz,), dp = vjp_step(one_step, [z_in], cotangent, {"lambda": lam})
        return dz, dp["lambda"]

    # final step (t = 1) first, then t = 2 .. T
    cot, grad = step_vjp(1, cot)
    for k in range(1, T):
        cot, g = step_vjp(k + 1, cot)
        grad = grad + g
    grad = grad + beta_reg * np.sign(lam)
    return GradResult(recon + reg, recon, reg, grad, METER.peak - base_floats, store.float_count)


ENGINES = {NAIVE: naive_backprop, CHECKPOINTED: checkpointed_backprop}


def _groups(model: Denoiser):
    cfg = model.config
    return gate_groups(cfg.n_blocks, cfg.n_heads, cfg.d_ff)


@dataclass
class PruneRunReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("step", "recon_loss", "reg_loss", "total_loss", "gate_mean",
               "gate_saturated", "peak_floats", "wall_time")

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self):
        return len(self.rows)


def learn_mask(base: Denoiser, conditions: Sequence[int], cfg: PruneConfig = PruneConfig(),
               gate_cfg: GateConfig = GateConfig(), schedule: Optional[NoiseSchedule] = None,
               seed: int = 0, mode: SamplerMode = SamplerMode(),
               lam_init: Optional[np.ndarray] = None):
    """Learn mask logits for a frozen model; returns ``(lam, report)``."""
    from .diffusion import make_schedule

    schedule = schedule or make_schedule(cfg.T_train)
    conditions = np.asarray(conditions)
    if conditions.size == 0:
        raise ValueError("at least one condition id is required")
    mcfg = base.config
    params = GateParams.initial(mcfg.n_blocks, mcfg.n_heads, mcfg.d_ff)
    lam = params.lam if lam_init is None else np.array(lam_init, dtype=np.float64)
    groups = params.groups
    lr = np.concatenate([np.full(n, cfg.lr_attn if name.endswith("heads") else cfg.lr_ffn)
                         for name, n in groups])
    opt = Adam(lr={"lambda": lr}, weight_decay=cfg.weight_decay)
    engine = ENGINES[cfg.engine]
    rng = np.random.default_rng(seed)
    report = PruneRunReport()
    initial, over = None, 0
    shape = (cfg.batch_size, mcfg.seq_len, mcfg.d_model)

    for step in range(cfg.steps):
        start = time.perf_counter()
        y = conditions[rng.integers(0, conditions.size, size=cfg.batch_size)]
        z_T = rng.standard_normal(shape)
        u = draw_uniforms(rng, lam.size) if cfg.stochastic_gates else None
        target = reference_latent(base, z_T, y, schedule, mode)
        res = engine(z_T, y, target, base, lam, gate_cfg, cfg.beta_reg, schedule, u, mode, groups)
        opt.step({"lambda": lam}, {"lambda": res.grad})

        eg = expected_gate(lam, gate_cfg)
        report.append(step=step, recon_loss=res.recon, reg_loss=res.reg, total_loss=res.loss,
                      gate_mean=float(eg.mean()),
                      gate_saturated=float(((eg == 0.0) | (eg == 1.0)).mean()),
                      peak_floats=res.peak_floats, wall_time=time.perf_counter() - start)
        if not initial:
            # a zero first loss (open gates, no penalty) gives no scale; wait for one
            initial = res.loss
        over = over + 1 if initial and res.loss > 10.0 * initial else 0
        if over >= 20:
            raise DivergenceError(f"loss above 10x its initial value ({initial:.4g}) for 20 "
                                  f"consecutive steps at step {step}")
        if step % 50 == 0:
            log.debug("step %d loss %.5g recon %.5g gate_mean %.3f", step, res.loss,
                      res.recon, report.rows[-1]["gate_mean"])
    return lam, report
