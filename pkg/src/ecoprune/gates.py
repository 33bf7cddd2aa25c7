"""Hard-concrete gates over mask logits, sparsity penalties and thresholding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops

DEFAULT_LAMBDA_INIT = 5.0


@dataclass(frozen=True)
class GateConfig:
    """Constants of the stretched, clamped logistic gate.

    ``beta_stretch`` is the constant inside the L0 expectation term; it is
    unrelated to the regularization weight used by the trainer.
    """
    alpha_temp: float = 1.0
    zeta: float = 1.1
    gamma: float = -0.1
    delta: float = 0.5
    beta_stretch: float = 0.83

    def __post_init__(self):
        if not self.zeta > 1.0:
            raise ValueError(f"zeta must be > 1, got {self.zeta}")
        if not self.gamma < 0.0:
            raise ValueError(f"gamma must be < 0, got {self.gamma}")
        if not self.delta > 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.alpha_temp > 0.0:
            raise ValueError(f"alpha_temp must be > 0, got {self.alpha_temp}")


# constants used for the distribution plots
PLOT_GATE_CONFIG = GateConfig(delta=1e-8)


def gate_groups(n_blocks: int, n_heads: int, d_ff: int) -> tuple:
    """Prunable-unit groups in storage order: heads then FFN neurons, per block."""
    groups = []
    for b in range(n_blocks):
        groups.append((f"blocks.{b}.heads", n_heads))
        groups.append((f"blocks.{b}.ffn", d_ff))
    return tuple(groups)


@dataclass
class GateParams:
    lam: np.ndarray
    groups: tuple

    @classmethod
    def initial(cls, n_blocks: int, n_heads: int, d_ff: int,
                value: float = DEFAULT_LAMBDA_INIT) -> "GateParams":
        groups = gate_groups(n_blocks, n_heads, d_ff)
        return cls(np.full(sum(n for _, n in groups), float(value)), groups)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.shape != (sum(n for _, n in self.groups),):
            raise ValueError(f"lambda has shape {self.lam.shape}, groups cover "
                             f"{sum(n for _, n in self.groups)} units")

    def group_slices(self) -> dict:
        out, start = {}, 0
        for name, n in self.groups:
            out[name] = slice(start, start + n)
            start += n
        return out


def per_block(values, groups: Sequence) -> list:
    """Split a flat gate vector into ``[(head_gates, ffn_gates), ...]``."""
    pieces = ops.split(values, [n for _, n in groups])
    return [(pieces[i], pieces[i + 1]) for i in range(0, len(pieces), 2)]


def logistic_noise(u, delta: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.log(u + delta) - np.log(1.0 - u + delta)


def sample_gate(lam, u, cfg: GateConfig):
    """Hard-concrete gate value(s) in [0, 1] for logits ``lam`` and uniforms ``u``.

    Differentiable in ``lam`` when it is a tape ``Var``.
    """
    s = ops.sigmoid(ops.scale(ops.add(lam, logistic_noise(u, cfg.delta)), 1.0 / cfg.alpha_temp))
    s_bar = ops.add(ops.scale(s, cfg.zeta - cfg.gamma), cfg.gamma)
    return ops.clamp01(s_bar)


def expected_gate(lam, cfg: GateConfig):
    """Noise-free gate: ``sample_gate`` at u = 0.5."""
    return sample_gate(lam, np.full(np.shape(ops.value_of(lam)), 0.5), cfg)


def draw_uniforms(rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.random(n)
    # keep u strictly inside (0, 1)
    return np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)


def l0_loss(lam, cfg: GateConfig) -> float:
    """Expected count of open gates, sum_j sigmoid(log lam_j - beta log(-gamma/zeta))."""
    lv = np.asarray(lam, dtype=np.float64)
    if (lv <= 0.0).any():
        raise ValueError("l0_loss needs every lambda > 0 (log lambda is undefined otherwise)")
    shift = cfg.beta_stretch * math.log(-cfg.gamma / cfg.zeta)
    return float(ops.sigmoid(np.log(lv) - shift).sum())


def l1_regularizer(lam):
    return ops.l1_norm(lam)


@dataclass
class BinaryMask:
    bits: np.ndarray
    groups: tuple
    threshold: float = float("nan")

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")

    @property
    def achieved_sparsity(self) -> float:
        return float((self.bits == 0).sum()) / self.bits.size if self.bits.size else 0.0

    def as_gates(self) -> list:
        """Per-block ``(head_gates, ffn_gates)`` float arrays."""
        return per_block(self.bits.astype(np.float64), self.groups)

    def group_bits(self) -> dict:
        out, start = {}, 0
        for name, n in self.groups:
            out[name] = self.bits[start:start + n]
            start += n
        return out

    @classmethod
    def ones(cls, groups) -> "BinaryMask":
        return cls(np.ones(sum(n for _, n in groups), dtype=np.int8), tuple(groups))


def n_pruned(n: int, target_sparsity: float) -> int:
    # tolerance guards products like 0.29 * 100 = 28.999999999999996
    return int(math.floor(n * target_sparsity + 1e-9))


def _prune_lowest(values: np.ndarray, k: int) -> tuple:
    bits = np.ones(values.size, dtype=np.int8)
    if k == 0:
        return bits, float("-inf")
    order = np.argsort(values, kind="stable")
    bits[order[:k]] = 0
    return bits, float(values[order[k - 1]])


def threshold_mask(lam, target_sparsity: float, mode: str = "global",
                   groups: Sequence | None = None) -> BinaryMask:
    """Binary mask keeping the units with the largest ``lam``.

    ``global`` prunes the lowest ``floor(n * target)`` values of the pooled
    vector; ``local`` does the same inside each group. Ties go to the lower
    unit index.
    """
    lv = np.asarray(lam, dtype=np.float64).reshape(-1)
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target_sparsity must lie in [0, 1), got {target_sparsity}")
    if groups is None:
        groups = (("all", lv.size),)
    groups = tuple(groups)
    if sum(n for _, n in groups) != lv.size:
        raise ValueError("groups do not cover lambda")
    if mode == "global":
        bits, tau = _prune_lowest(lv, n_pruned(lv.size, target_sparsity))
        return BinaryMask(bits, groups, tau)
    if mode == "local":
        parts, start = [], 0
        for _, n in groups:
            part, _ = _prune_lowest(lv[start:start + n], n_pruned(n, target_sparsity))
            parts.append(part)
            start += n
        return BinaryMask(np.concatenate(parts), groups)
    raise ValueError(f"mode must be 'global' or 'local', got {mode!r}")


def random_mask(groups: Sequence, target_sparsity: float, rng: np.random.Generator) -> BinaryMask:
    """Mask with the same pruned count as global thresholding, units chosen uniformly."""
    groups = tuple(groups)
    n = sum(k for _, k in groups)
    bits = np.ones(n, dtype=np.int8)
    bits[rng.choice(n, size=n_pruned(n, target_sparsity), replace=False)] = 0
    return BinaryMask(bits, groups)
