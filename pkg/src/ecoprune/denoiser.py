"""Tiny gated transformer noise predictor.

Parameters live in a flat ``name -> array`` dict so the same forward code
runs on raw arrays (no recording) or on tape leaves (training). Attention
projections are stored per block as column bands: head ``i`` owns columns
``[i*d_head, (i+1)*d_head)`` of ``wq``/``wk``/``wv`` and the matching row
band of ``wo``. Compaction drops bands, so the head count of a block is read
from the stored shapes rather than from the config.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tape import DimensionError

BLOCK_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
              "ln1.g", "ln1.b", "ln2.g", "ln2.b")


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 16
    n_heads: int = 4
    d_ff: int = 32
    n_blocks: int = 3
    seq_len: int = 4
    n_conditions: int = 8
    T: int = 8

    def __post_init__(self):
        for field, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"{field} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_gates(self) -> int:
        return self.n_blocks * (self.n_heads + self.d_ff)


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict

    def n_heads(self, block: int) -> int:
        return self.params[f"blocks.{block}.wq"].shape[1] // self.config.d_head

    def d_ff(self, block: int) -> int:
        return self.params[f"blocks.{block}.w1"].shape[1]

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()})

    def __deepcopy__(self, memo):
        return self.copy()


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Random initialization; projections scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    d, dff, h, dh = config.d_model, config.d_ff, config.n_heads, config.d_head

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    p = {
        "time.w": dense(d, d),
        "time.b": np.zeros(d),
        "cond.table": rng.normal(0.0, 0.5, size=(config.n_conditions, d)),
    }
    for b in range(config.n_blocks):
        pre = f"blocks.{b}."
        p[pre + "wq"] = dense(d, h * dh)
        p[pre + "wk"] = dense(d, h * dh)
        p[pre + "wv"] = dense(d, h * dh)
        p[pre + "wo"] = dense(h * dh, d)
        p[pre + "w1"] = dense(d, dff)
        p[pre + "b1"] = np.zeros(dff)
        p[pre + "w2"] = dense(dff, d)
        p[pre + "b2"] = np.zeros(d)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    return Denoiser(config, p)


def attention_head(x, wq, wk, wv):
    """softmax(Q K^T / sqrt(d_k)) V for one head; x is (..., L, d_model)."""
    xv, wqv = ops.value_of(x), ops.value_of(wq)
    if xv.shape[-1] != wqv.shape[0]:
        raise DimensionError(f"attention_head: input feature size {xv.shape[-1]} does not "
                             f"match projection rows {wqv.shape[0]}")
    d_k = wqv.shape[1]
    q = ops.matmul(x, wq)
    k = ops.matmul(x, wk)
    v = ops.matmul(x, wv)
    scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d_k))
    return ops.matmul(ops.softmax(scores), v)


def mha_masked(x, wq, wk, wv, wo, d_head: int, gates=None):
    """Multi-head attention with one multiplicative gate per head.

    ``gates=None`` is the ungated map. A block with zero heads returns zeros.
    """
    n_heads = ops.value_of(wq).shape[1] // d_head
    if gates is not None and ops.value_of(gates).shape != (n_heads,):
        raise DimensionError(f"mha_masked: expected {n_heads} head gates, got shape "
                             f"{ops.value_of(gates).shape}")
    if n_heads == 0:
        xv = ops.value_of(x)
        return np.zeros(xv.shape[:-1] + (ops.value_of(wo).shape[1],))
    sizes = [d_head] * n_heads
    q_bands, k_bands, v_bands = (ops.split(w, sizes) for w in (wq, wk, wv))
    gate_list = ops.split(gates, [1] * n_heads) if gates is not None else None
    outs = []
    for i in range(n_heads):
        attn = attention_head(x, q_bands[i], k_bands[i], v_bands[i])
        if gate_list is not None:
            attn = ops.mul(attn, gate_list[i])
        outs.append(attn)
    return ops.matmul(ops.concat(outs, axis=-1), wo)


def ffn_masked(x, w1, b1, w2, b2, gates=None):
    """(GELU(x W1 + b1) * gates) W2 + b2, gates broadcast over tokens."""
    width = ops.value_of(w1).shape[1]
    if gates is not None and ops.value_of(gates).shape != (width,):
        raise DimensionError(f"ffn_masked: expected {width} neuron gates, got shape "
                             f"{ops.value_of(gates).shape}")
    if width == 0:
        xv = ops.value_of(x)
        return ops.add(np.zeros(xv.shape[:-1] + (ops.value_of(b2).shape[0],)), b2)
    hidden = ops.gelu(ops.add(ops.matmul(x, w1), b1))
    if gates is not None:
        hidden = ops.mul(hidden, gates)
    return ops.add(ops.matmul(hidden, w2), b2)


def time_features(t, d_model: int) -> np.ndarray:
    """Sinusoidal features of the step index, shape ``t.shape + (d_model,)``."""
    t = np.asarray(t, dtype=np.float64)
    half = d_model // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[..., None] * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if d_model % 2:
        feats = np.concatenate([feats, np.zeros(t.shape + (1,))], axis=-1)
    return feats


def _check_tokens(model: Denoiser, z):
    shape = ops.value_of(z).shape
    cfg = model.config
    if len(shape) not in (2, 3) or shape[-2:] != (cfg.seq_len, cfg.d_model):
        raise DimensionError(f"latent must be (L, d_model)=({cfg.seq_len}, {cfg.d_model}) "
                             f"or batched, got {shape}")
    return len(shape) == 3


def denoiser_forward(model: Denoiser, z, t, y, gates: Optional[Sequence] = None,
                     params: Optional[dict] = None):
    """Noise prediction for latent ``z`` at step ``t`` under condition ``y``.

    ``z`` is (L, d_model) with scalar ``t``/``y``, or (B, L, d_model) with
    ``t``/``y`` scalars or length-B integer arrays. ``gates`` is ``None`` or a
    per-block sequence of ``(head_gates, ffn_gates)``. ``params`` overrides
    ``model.params`` (used to pass tape leaves).
    """
    cfg = model.config
    p = model.params if params is None else params
    batched = _check_tokens(model, z)
    t_arr = np.asarray(t)
    y_arr = np.asarray(y)
    if t_arr.dtype.kind not in "iu" or t_arr.size == 0 or t_arr.min() < 1 or t_arr.max() > cfg.T:
        raise ValueError(f"step index must be an integer in [1, {cfg.T}], got {t}")
    if y_arr.dtype.kind not in "iu" or y_arr.size == 0 or y_arr.min() < 0 or y_arr.max() >= cfg.n_conditions:
        raise ValueError(f"condition id must be an integer in [0, {cfg.n_conditions}), got {y}")
    if t_arr.ndim > 1 or y_arr.ndim > 1 or (not batched and (t_arr.ndim or y_arr.ndim)):
        raise DimensionError("t and y must be scalars, or 1-D arrays for a batched latent")
    if gates is not None and len(gates) != cfg.n_blocks:
        raise DimensionError(f"expected gates for {cfg.n_blocks} blocks, got {len(gates)}")

    temb = ops.add(ops.matmul(time_features(t_arr, cfg.d_model)[..., None, :], p["time.w"]),
                   p["time.b"])
    cemb = ops.embedding(p["cond.table"], y_arr)
    if y_arr.ndim == 1:
        cemb = ops.reshape(cemb, (y_arr.size, 1, cfg.d_model))
    else:
        cemb = ops.reshape(cemb, (1, cfg.d_model))
    x = ops.add(ops.add(z, temb), cemb)

    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        head_g, ffn_g = (None, None) if gates is None else gates[b]
        h = ops.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = ops.add(x, mha_masked(h, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"],
                                  p[pre + "wo"], cfg.d_head, head_g))
        h = ops.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        x = ops.add(x, ffn_masked(h, p[pre + "w1"], p[pre + "b1"], p[pre + "w2"],
                                  p[pre + "b2"], ffn_g))
    return x
