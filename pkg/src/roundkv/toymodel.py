"""Deterministic seeded toy transformer that produces ground-truth layered KV.

The forward pass is: token embedding, then per layer a causal attention block
with rotary position encoding on Q and K and a linear output mix folded into a
residual stream. There is no MLP and no normalization. Deeper-layer K/V rows
therefore depend on the whole left context, which is exactly the effect that
position-independent reuse has to correct for.

All tensor arithmetic is float32. Rotation angles and the rotation itself are
computed in float64 and cast back, because float32 angles lose enough absolute
precision at positions in the hundreds to swamp the 1e-6 equivalence budget.
Weights come from numpy's PCG64 seeded through a SeedSequence (a named,
splittable 64-bit generator) and are drawn in a fixed order, so two builds
from the same config are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import LayeredKv, ModelConfig, PositionSpan


@dataclass(eq=False)
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray          # (vocab, hidden)
    wq: np.ndarray             # (layers, hidden, hidden)
    wk: np.ndarray
    wv: np.ndarray
    wm: np.ndarray             # output mix back into the residual stream


def build_weights(config: ModelConfig) -> ModelWeights:
    """Draw all weights uniform in [-0.1, 0.1] from one seeded stream.

    Draw order is fixed: embedding first, then per layer q, k, v, mix.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.weight_seed))
    hid = config.hidden_dim

    def draw(*shape: int) -> np.ndarray:
        return rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)

    embed = draw(config.vocab_size, hid)
    wq = np.empty((config.num_layers, hid, hid), dtype=np.float32)
    wk = np.empty_like(wq)
    wv = np.empty_like(wq)
    wm = np.empty_like(wq)
    for layer in range(config.num_layers):
        wq[layer] = draw(hid, hid)
        wk[layer] = draw(hid, hid)
        wv[layer] = draw(hid, hid)
        wm[layer] = draw(hid, hid)
    return ModelWeights(config, embed, wq, wk, wv, wm)


def rope_apply(k: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotate each head-dim pair (2j, 2j+1) of ``k`` by angle pos * base^(-2j/D).

    ``k`` has shape (T, H, D); ``positions`` has shape (T,) and may be signed
    deltas. Returns a new float32 array.
    """
    if k.ndim != 3:
        raise ValueError("expected (tokens, heads, head_dim)")
    dim = k.shape[-1]
    if dim % 2 != 0:
        raise ValueError("head_dim must be even")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (k.shape[0],):
        raise ValueError("one position per token required")
    inv_freq = float(base) ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = pos[:, None] * inv_freq[None, :]            # (T, D/2)
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    x = k[..., 0::2].astype(np.float64)
    y = k[..., 1::2].astype(np.float64)
    out = np.empty_like(k, dtype=np.float64)
    out[..., 0::2] = x * cos - y * sin
    out[..., 1::2] = x * sin + y * cos
    return out.astype(np.float32)


def rope_recover(span: PositionSpan, k: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Re-encode K rows from span.old_positions to span.new_positions.

    A zero-delta span is an exact no-op (returns an unmodified copy).
    """
    if k.shape[0] != len(span):
        raise ValueError("span length must match token count")
    delta = span.delta
    if not delta.any():
        return k.copy()
    return rope_apply(k, delta, base)


def _selective_forward(
    weights: ModelWeights,
    tokens: np.ndarray,
    positions: np.ndarray,
    fix_idx: np.ndarray,
    ctx_k: np.ndarray,
    ctx_v: np.ndarray,
    max_layer: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that materializes fresh K/V only at ``fix_idx`` rows.

    Attention for a fixed row sees fresh values at the other fixed rows and
    ``ctx_k``/``ctx_v`` rows everywhere else (causally masked by sequence
    index). Returns float32 arrays of shape (layers_run, F, H, D). With
    fix_idx covering every row the context is never read and this is a plain
    full prefill.
    """
    cfg = weights.config
    n_layers = cfg.num_layers if max_layer is None else max_layer
    heads, dim = cfg.num_heads, cfg.head_dim
    t_total = tokens.shape[0]
    fcount = fix_idx.shape[0]
    out_k = np.empty((n_layers, fcount, heads, dim), dtype=np.float32)
    out_v = np.empty_like(out_k)
    if fcount == 0:
        return out_k, out_v

    fix_pos = positions[fix_idx]
    scale = np.float32(1.0 / np.sqrt(dim))
    causal = np.arange(t_total)[None, :] <= fix_idx[:, None]   # (F, T)
    h = weights.embed[tokens[fix_idx]]                          # (F, hidden)

    for layer in range(n_layers):
        q = rope_apply((h @ weights.wq[layer]).reshape(fcount, heads, dim), fix_pos, cfg.rope_base)
        k = rope_apply((h @ weights.wk[layer]).reshape(fcount, heads, dim), fix_pos, cfg.rope_base)
        v = (h @ weights.wv[layer]).reshape(fcount, heads, dim)
        out_k[layer] = k
        out_v[layer] = v

        k_att = ctx_k[layer].copy()
        v_att = ctx_v[layer].copy()
        k_att[fix_idx] = k
        v_att[fix_idx] = v

        scores = np.einsum("fhd,thd->hft", q, k_att) * scale
        scores = np.where(causal[None, :, :], scores, np.float32(-np.inf))
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights_att = np.exp(scores)
        weights_att /= weights_att.sum(axis=-1, keepdims=True)
        mix = np.einsum("hft,thd->fhd", weights_att, v_att)
        h = h + mix.reshape(fcount, heads * dim) @ weights.wm[layer]

    return out_k, out_v


def full_prefill(weights: ModelWeights, tokens: Sequence[int], start_pos: int = 0) -> LayeredKv:
    """Ground-truth prefill: layered KV for ``tokens`` at absolute positions
    start_pos .. start_pos + len(tokens) - 1. Deterministic given the weights."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValueError("tokens must be one non-empty sequence")
    if toks.min() < 0 or toks.max() >= weights.config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    cfg = weights.config
    t_total = toks.shape[0]
    positions = np.arange(start_pos, start_pos + t_total, dtype=np.int64)
    zeros = np.zeros((cfg.num_layers, t_total, cfg.num_heads, cfg.head_dim), dtype=np.float32)
    k, v = _selective_forward(weights, toks, positions, np.arange(t_total), zeros, zeros)
    return LayeredKv(k, v, positions)


def recompute_positions(
    weights: ModelWeights,
    tokens: Sequence[int],
    positions_to_fix: Sequence[int],
    context_kv: LayeredKv,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fresh K/V rows at ``positions_to_fix`` computed against cached context.

    Rows outside the fix set are taken from ``context_kv`` as-is; fixed rows
    attend over each other fresh. ``context_kv`` is not modified. Returns
    (sorted_fix_idx, k_rows, v_rows) with row arrays of shape (L, F, H, D);
    an empty fix set yields empty arrays.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.shape[0] != context_kv.num_tokens:
        raise ValueError("context must cover the full token sequence")
    if context_kv.num_layers != weights.config.num_layers:
        raise ValueError("context layer count does not match the model")
    fix = np.unique(np.asarray(list(positions_to_fix), dtype=np.int64))
    if fix.size and (fix[0] < 0 or fix[-1] >= toks.shape[0]):
        raise ValueError("fix index out of range")
    k, v = _selective_forward(weights, toks, context_kv.positions, fix, context_kv.k, context_kv.v)
    return fix, k, v
