"""Desk-scale experiments behind the CLI: training, profiling, gate curves, evaluation."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..compactor import count_params, estimate_flops
from ..denoiser import Denoiser, DenoiserConfig, init_denoiser
from ..diffusion import (NoiseSchedule, SamplerMode, SyntheticLatents, base_train_step,
                         full_sample, make_schedule)
from ..gates import GateConfig, draw_uniforms, gate_groups, sample_gate
from ..optim import Adam
from ..pruning import ENGINES, PruneRunReport, learn_mask, reference_latent
from .config import RunConfig, parse_float_list


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("ECOPRUNE_THREADS", "1")))
    except ValueError:
        return 1


def schedule_for(cfg: RunConfig, T: int | None = None) -> NoiseSchedule:
    return make_schedule(cfg.model.T if T is None else T, cfg.diffusion.beta_start,
                         cfg.diffusion.beta_end)


def sampler_for(cfg: RunConfig) -> SamplerMode:
    return SamplerMode(cfg.diffusion.sampler, cfg.diffusion.sampler_seed)


def dataset_for(cfg: RunConfig) -> SyntheticLatents:
    m, d = cfg.model, cfg.diffusion
    return SyntheticLatents(m.n_conditions, m.seq_len, m.d_model, d.data_mean_scale,
                            d.data_spread, d.data_seed)


def train_base(cfg: RunConfig):
    """Pretrain a denoiser on the synthetic data; returns ``(model, rows)``."""
    seed = cfg.run.seed
    model = init_denoiser(cfg.model, seed)
    schedule = schedule_for(cfg)
    data = dataset_for(cfg)
    opt = Adam(cfg.diffusion.train_lr)
    rng = np.random.default_rng([seed, 1])
    rows = []
    for step in range(cfg.diffusion.train_steps):
        z0, y = data.sample(cfg.diffusion.train_batch, rng)
        rows.append({"step": step, "loss": base_train_step(z0, y, model, schedule, opt, rng)})
    return model, rows


def run_learn_mask(cfg: RunConfig, base: Denoiser, conditions=None):
    conditions = cfg.condition_ids() if conditions is None else conditions
    schedule = schedule_for(cfg, cfg.prune.T_train)
    return learn_mask(base, conditions, cfg.prune, cfg.gates, schedule,
                      seed=cfg.run.seed, mode=sampler_for(cfg))


def report_rows(report: PruneRunReport, timing: bool) -> tuple:
    header = [c for c in report.COLUMNS if timing or c != "wall_time"]
    return header, report.rows


# -- profiling --------------------------------------------------------------

PROFILE_HEADER = ("T", "engine", "peak_activation_floats", "checkpoint_floats",
                  "median_wall_time", "runs")


def profile_engines(T_values, repeats: int = 5, batch: int = 4,
                    model_config: DenoiserConfig | None = None, gate_cfg: GateConfig = GateConfig(),
                    beta_reg: float = 0.5, seed: int = 0, engines=("naive", "checkpointed")) -> list:
    """Peak retained floats and median wall time of each gradient engine per T.

    Runs alternate between engines inside each repeat so that slow drifts in
    machine load hit both equally.
    """
    T_values = [int(t) for t in T_values]
    base_cfg = model_config or DenoiserConfig()
    mcfg = DenoiserConfig(**{**base_cfg.__dict__, "T": max(T_values + [base_cfg.T])})
    model = init_denoiser(mcfg, seed)
    groups = gate_groups(mcfg.n_blocks, mcfg.n_heads, mcfg.d_ff)
    rng = np.random.default_rng([seed, 2])
    rows = []
    for T in T_values:
        schedule = make_schedule(T)
        z_T = rng.standard_normal((batch, mcfg.seq_len, mcfg.d_model))
        y = rng.integers(0, mcfg.n_conditions, size=batch)
        lam = rng.normal(0.0, 1.0, size=mcfg.n_gates)
        u = draw_uniforms(rng, lam.size)
        target = reference_latent(model, z_T, y, schedule)
        times = {e: [] for e in engines}
        peaks, stores = {}, {}
        for _ in range(repeats):
            for e in engines:
                start = time.perf_counter()
                res = ENGINES[e](z_T, y, target, model, lam, gate_cfg, beta_reg, schedule, u,
                                 groups=groups)
                times[e].append(time.perf_counter() - start)
                peaks[e], stores[e] = res.peak_floats, res.store_floats
        for e in engines:
            rows.append({"T": T, "engine": e, "peak_activation_floats": peaks[e],
                         "checkpoint_floats": stores[e],
                         "median_wall_time": float(np.median(times[e])), "runs": repeats})
    return rows


# -- gate distribution curves ----------------------------------------------

GATE_CURVE_HEADER = ("delta", "lambda", "mean_gate", "frac_zero", "frac_one")


def gate_curve(deltas, lambdas, draws: int = 10000, base_cfg: GateConfig = GateConfig(),
               seed: int = 0) -> list:
    """Monte-Carlo mean gate versus lambda, one curve per delta.

    The same uniforms are reused across lambda values of a curve.
    """
    rows = []
    for delta in deltas:
        cfg = GateConfig(base_cfg.alpha_temp, base_cfg.zeta, base_cfg.gamma, float(delta),
                         base_cfg.beta_stretch)
        u = draw_uniforms(np.random.default_rng([seed, 3]), draws)
        for lam in lambdas:
            g = sample_gate(np.full(draws, float(lam)), u, cfg)
            rows.append({"delta": float(delta), "lambda": float(lam),
                         "mean_gate": float(g.mean()), "frac_zero": float((g == 0.0).mean()),
                         "frac_one": float((g == 1.0).mean())})
    return rows


def max_slope(rows, delta: float) -> float:
    pts = sorted((r["lambda"], r["mean_gate"]) for r in rows if r["delta"] == delta)
    lam = np.array([p[0] for p in pts])
    mean = np.array([p[1] for p in pts])
    return float(np.max(np.diff(mean) / np.diff(lam)))


def gate_curve_from_config(cfg: RunConfig) -> list:
    r = cfg.run
    lambdas = np.linspace(r.gate_curve_lambda_min, r.gate_curve_lambda_max, r.gate_curve_points)
    return gate_curve(parse_float_list(r.gate_curve_deltas), lambdas, r.gate_curve_draws,
                      cfg.gates, cfg.run.seed)


# -- evaluation -------------------------------------------------------------

EVAL_HEADER = ("condition", "mse", "moment_distance", "params_base", "params_pruned",
               "flops_base", "flops_pruned")


def moment_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mean_a - mean_b||_2 + ||cov_a - cov_b||_F over flattened samples."""
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    mu = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
    if len(a) < 2:
        return float(mu)
    cov = np.linalg.norm(np.cov(a, rowvar=False) - np.cov(b, rowvar=False))
    return float(mu + cov)


def paired_final_latents(base: Denoiser, other: Denoiser, z_T, y, schedule: NoiseSchedule,
                         other_gates=None, mode: SamplerMode = SamplerMode()):
    ref = full_sample(z_T, y, base, schedule, None, mode)
    out = full_sample(z_T, y, other, schedule, other_gates, mode)
    return np.asarray(ref), np.asarray(out)


def eval_run(base: Denoiser, other: Denoiser, n_samples: int, conditions, schedule: NoiseSchedule,
             seed: int = 0, other_gates=None, mode: SamplerMode = SamplerMode(),
             sized: Denoiser | None = None) -> list:
    """Per-condition paired metrics of ``other`` against ``base`` (shared initial noise).

    ``sized`` is the model whose params and flops are reported for ``other``;
    pass the compacted model when ``other`` is the base run with binary gates.
    """
    conditions = [int(c) for c in conditions]
    for c in conditions:
        if not 0 <= c < base.config.n_conditions:
            raise ValueError(f"condition id {c} outside [0, {base.config.n_conditions})")
    cfg = base.config
    sized = other if sized is None else sized
    params = (count_params(base), count_params(sized))
    flops = (estimate_flops(base, schedule.T), estimate_flops(sized, schedule.T))

    def one(c):
        rng = np.random.default_rng([seed, 4, c])
        z_T = rng.standard_normal((n_samples, cfg.seq_len, cfg.d_model))
        y = np.full(n_samples, c)
        ref, out = paired_final_latents(base, other, z_T, y, schedule, other_gates, mode)
        return {"condition": c, "mse": float(np.mean((ref - out) ** 2)),
                "moment_distance": moment_distance(ref, out),
                "params_base": params[0], "params_pruned": params[1],
                "flops_base": flops[0], "flops_pruned": flops[1]}

    workers = min(n_threads(), len(conditions))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, conditions))
    return [one(c) for c in conditions]
