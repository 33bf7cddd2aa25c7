"""Physically remove pruned heads and FFN neurons; size and cost accounting."""
from __future__ import annotations

import warnings

import numpy as np

from .denoiser import Denoiser
from .gates import BinaryMask


class EmptyBlockWarning(UserWarning):
    """Every head or every neuron of a block was pruned."""


def compact_model(model: Denoiser, mask: BinaryMask) -> Denoiser:
    """Copy of ``model`` without the units whose mask bit is 0.

    Input and output dimensions are unchanged; a block that loses all heads
    (or neurons) keeps only its residual path (plus ``b2`` for the FFN).
    """
    cfg = model.config
    groups = mask.group_bits()
    p = {k: v.copy() for k, v in model.params.items()}
    dh = cfg.d_head
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        try:
            heads = groups[f"blocks.{b}.heads"].astype(bool)
            neurons = groups[f"blocks.{b}.ffn"].astype(bool)
        except KeyError:
            raise ValueError(f"mask has no groups for block {b}") from None
        if heads.size != model.n_heads(b) or neurons.size != model.d_ff(b):
            raise ValueError(f"mask groups for block {b} do not match its "
                             f"{model.n_heads(b)} heads / {model.d_ff(b)} neurons")
        cols = np.repeat(heads, dh)
        for key in ("wq", "wk", "wv"):
            p[pre + key] = p[pre + key][:, cols]
        p[pre + "wo"] = p[pre + "wo"][cols, :]
        p[pre + "w1"] = p[pre + "w1"][:, neurons]
        p[pre + "b1"] = p[pre + "b1"][neurons]
        p[pre + "w2"] = p[pre + "w2"][neurons, :]
        if not heads.any():
            warnings.warn(f"block {b}: all attention heads pruned; attention reduces to the "
                          f"residual path", EmptyBlockWarning, stacklevel=2)
        if not neurons.any():
            warnings.warn(f"block {b}: all FFN neurons pruned; FFN reduces to its output bias",
                          EmptyBlockWarning, stacklevel=2)
    return Denoiser(cfg, p)


def count_params(model: Denoiser) -> int:
    """Number of stored floats across all weights, biases and tables."""
    return int(sum(v.size for v in model.params.values()))


def flops_breakdown(model: Denoiser) -> dict:
    """Per-forward flop estimate split into ``embed``, ``attn`` and ``ffn``.

    Matmuls count 2 flops per multiply-accumulate; softmax and GELU count 5
    per element. Layer norms and residual adds are ignored.
    """
    cfg = model.config
    if not model.params:
        return {"embed": 0, "attn": 0, "ffn": 0}
    L, d, dh = cfg.seq_len, cfg.d_model, cfg.d_head
    embed = 2 * d * d
    attn = ffn = 0
    for b in range(cfg.n_blocks):
        h = model.n_heads(b)
        f = model.d_ff(b)
        per_head = 3 * 2 * L * d * dh + 2 * L * L * dh + 5 * L * L + 2 * L * L * dh
        attn += h * per_head + 2 * L * (h * dh) * d
        ffn += 2 * L * d * f + 5 * L * f + 2 * L * f * d
    return {"embed": embed, "attn": attn, "ffn": ffn}


def estimate_flops(model: Denoiser, T: int) -> int:
    """Flops for a T-step sampling run of one latent."""
    if int(T) < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return int(T) * sum(flops_breakdown(model).values())
