"""Attention blocks and the position-wise feed-forward.

Every block takes a parameter mapping (a plain dict works, as does a
:class:`mctrans.model.ParamView`). Sublayers are wrapped post-norm:
``layer_norm(x + sublayer(x))``.

Masks follow the softmax convention: True marks an allowed key. Key padding
masks are ``[..., S]`` boolean arrays and are broadcast over query rows.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .tensor import (ShapeError, Tensor, add, concat_time, layer_norm, matmul, relu, reshape,
                     scale, softmax, swapaxes, transpose)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _scope(p: Mapping, name: str) -> Mapping:
    if hasattr(p, "scope"):
        return p.scope(name)
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def _key_mask(mask) -> Optional[np.ndarray]:
    """Lift a ``[..., S]`` key mask so it broadcasts over query rows."""
    if mask is None:
        return None
    return np.asarray(mask, dtype=bool)[..., None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    x = reshape(x, x.shape[:-1] + (heads, d // heads))
    return swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = swapaxes(x, -2, -3)
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, d_model: Optional[int] = None,
                         heads: int = 1, return_weights: bool = False):
    """softmax(Q Kᵀ / √d_model, mask) V.

    ``mask`` must broadcast to the ``[..., r, s]`` score matrix. With several
    heads the feature axis is split evenly and heads are concatenated back;
    the scaling still uses the full model width.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    d_model = d_model or q.shape[-1]
    if heads > 1:
        if q.shape[-1] % heads:
            raise ShapeError(f"width {q.shape[-1]} not divisible by {heads} heads")
        q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            mask = mask[..., None, :, :] if mask.ndim >= 2 else mask
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d_model))
    weights = softmax(scores, mask)
    out = matmul(weights, v)
    if heads > 1:
        out = _merge_heads(out)
    return (out, weights) if return_weights else out


def position_wise_ff(x: Tensor, ff: Mapping) -> Tensor:
    """max(0, x W1 + b1) W2 + b2."""
    return linear(relu(linear(x, ff["W1"], ff["b1"])), ff["W2"], ff["b2"])


def _add_norm(x: Tensor, y: Tensor, p: Mapping, name: str) -> Tensor:
    return layer_norm(add(x, y), p[name + ".gamma"], p[name + ".beta"])


def _ff_sublayer(h: Tensor, p: Mapping) -> Tensor:
    return _add_norm(h, position_wise_ff(h, _scope(p, "ff")), p, "ff_ln")


def self_attention(x: Tensor, p: Mapping, mask=None, heads: int = 1, return_weights: bool = False):
    q = linear(x, p["W_q"], p["b_q"])
    k = linear(x, p["W_k"], p["b_k"])
    v = linear(x, p["W_v"], p["b_v"])
    return scaled_dot_attention(q, k, v, mask, x.shape[-1], heads, return_weights)


def channel_self_attention_block(x: Tensor, p: Mapping, key_mask=None, heads: int = 1) -> Tensor:
    """Intra-channel self-attention and the channel's own feed-forward."""
    a = self_attention(x, p, _key_mask(key_mask), heads)
    return _ff_sublayer(_add_norm(x, a, p, "attn_ln"), p)


def multichannel_encoder_attention(hs: Sequence[Tensor], ps: Sequence[Mapping],
                                   key_masks: Optional[Sequence] = None,
                                   heads: int = 1) -> list[Tensor]:
    """Each channel's queries attend over the time-concatenated keys/values of
    all other channels; with a single channel this is plain self-attention.
    """
    n = len(hs)
    if n == 0:
        raise ValueError("multi-channel encoder attention needs at least one channel")
    if len(ps) != n:
        raise ShapeError(f"{n} channels but {len(ps)} parameter sets")
    for i, h in enumerate(hs):
        if h.shape[-2] == 0:
            raise ValueError(f"channel {i} is empty")
    key_masks = list(key_masks) if key_masks is not None else [None] * n
    d_model = hs[0].shape[-1]
    qs = [linear(h, p["W_q"], p["b_q"]) for h, p in zip(hs, ps)]
    ks = [linear(h, p["W_k"], p["b_k"]) for h, p in zip(hs, ps)]
    vs = [linear(h, p["W_v"], p["b_v"]) for h, p in zip(hs, ps)]
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i] or [i]
        k = concat_time([ks[j] for j in others])
        v = concat_time([vs[j] for j in others])
        mask = _concat_masks([key_masks[j] for j in others], [hs[j] for j in others])
        a = scaled_dot_attention(qs[i], k, v, _key_mask(mask), d_model, heads)
        out.append(_ff_sublayer(_add_norm(hs[i], a, ps[i], "attn_ln"), ps[i]))
    return out


def _concat_masks(masks: list, hs: list) -> Optional[np.ndarray]:
    if all(m is None for m in masks):
        return None
    filled = [np.asarray(m, dtype=bool) if m is not None else np.ones(h.shape[:-1], dtype=bool)
              for m, h in zip(masks, hs)]
    return np.concatenate(filled, axis=-1)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def masked_target_self_attention(y: Tensor, p: Mapping, heads: int = 1,
                                 return_weights: bool = False):
    """Causal self-attention over target embeddings plus residual/norm."""
    res = self_attention(y, p, causal_mask(y.shape[-2]), heads, return_weights)
    a, w = res if return_weights else (res, None)
    out = _add_norm(y, a, p, "attn_ln")
    return (out, w) if return_weights else out


def multichannel_decoder_attention(h_sa: Tensor, h_e: Sequence[Tensor], p: Mapping,
                                   key_masks: Optional[Sequence] = None, heads: int = 1) -> Tensor:
    """Shared queries scored against every channel separately; channel
    contexts are averaged, then residual/norm and the shared feed-forward.

    ``p`` holds the shared ``W_q``/``b_q``, the per-channel ``ch{i}.W_k``,
    ``ch{i}.b_k``, ``ch{i}.W_v``, ``ch{i}.b_v`` and the norm/ff weights.
    """
    n = len(h_e)
    if n == 0:
        raise ValueError("multi-channel decoder attention needs at least one channel")
    if f"ch{n - 1}.W_k" not in p or f"ch{n}.W_k" in p:
        raise ShapeError(f"parameters do not describe exactly {n} channels")
    key_masks = list(key_masks) if key_masks is not None else [None] * n
    d_model = h_sa.shape[-1]
    q = linear(h_sa, p["W_q"], p["b_q"])
    total = None
    for i, h in enumerate(h_e):
        c = _scope(p, f"ch{i}")
        k = linear(h, c["W_k"], c["b_k"])
        v = linear(h, c["W_v"], c["b_v"])
        a = scaled_dot_attention(q, k, v, _key_mask(key_masks[i]), d_model, heads)
        total = a if total is None else add(total, a)
    h_md = scale(total, 1.0 / n)
    return _ff_sublayer(_add_norm(h_sa, h_md, p, "attn_ln"), p)
