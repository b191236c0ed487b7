"""Channel-feature and word embeddings with sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from .tensor import (BatchNormState, ConfigError, ShapeError, Tensor, activation, add, get_dtype,
                     matmul, normalize_batch, scale, take_rows)

T_MAX = 512


class CapacityError(ValueError):
    """Position beyond the precomputed positional table."""


@lru_cache(maxsize=32)
def _table(d_model: int, t_max: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"d_model must be even for positional encoding, got {d_model}")
    pos = np.arange(t_max, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((t_max, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    table.setflags(write=False)
    return table


def positional_table(length: int, d_model: int, t_max: int = T_MAX) -> np.ndarray:
    """First ``length`` rows of the sinusoidal table, in the default dtype."""
    if length > t_max:
        raise CapacityError(f"sequence length {length} exceeds positional capacity {t_max}")
    return _table(d_model, t_max)[:length].astype(get_dtype())


def pos_enc(t: int, d_model: int, t_max: int = T_MAX) -> np.ndarray:
    if t < 0 or t >= t_max:
        raise CapacityError(f"position {t} outside [0, {t_max})")
    return _table(d_model, t_max)[t].copy()


@dataclass
class EmbeddingOptions:
    norm: str = "none"          # "batch" | "none"
    activation: str = "none"    # "softsign" | "relu" | "none"
    scale: bool = False

    def __post_init__(self):
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"unknown embedding norm {self.norm!r}")
        if self.activation not in ("softsign", "relu", "none"):
            raise ConfigError(f"unknown embedding activation {self.activation!r}")


CHANNEL_DEFAULT = EmbeddingOptions(norm="batch", activation="softsign", scale=False)
WORD_DEFAULT = EmbeddingOptions()


def _post_projection(proj: Tensor, p: Mapping, opts: EmbeddingOptions, mode: str,
                     norm_state: Optional[BatchNormState], row_mask, update_stats: bool) -> Tensor:
    d_model = proj.shape[-1]
    if opts.scale:
        proj = scale(proj, np.sqrt(d_model))
    if opts.norm == "batch":
        if norm_state is None:
            raise ConfigError("batch norm enabled but no norm state supplied")
        proj = normalize_batch(proj, norm_state, mode, p["bn.gamma"], p["bn.beta"],
                               row_mask=row_mask, update_stats=update_stats)
    return activation(proj, opts.activation)


def embed_channel(x: Tensor, p: Mapping, mode: str = "infer",
                  opts: EmbeddingOptions = CHANNEL_DEFAULT,
                  norm_state: Optional[BatchNormState] = None,
                  row_mask=None, update_stats: bool = True) -> Tensor:
    """Activ(Norm(x W + b)) + PosEnc for a ``[..., T, D]`` feature block.

    ``p`` needs ``W``, ``b`` and, with batch norm, ``bn.gamma``/``bn.beta``.
    ``row_mask`` marks real (non-padded) frames for the batch statistics.
    """
    w = p["W"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel feature dim {x.shape[-1]} != embedding input dim {w.shape[0]}")
    proj = add(matmul(x, w), p["b"])
    h = _post_projection(proj, p, opts, mode, norm_state, row_mask, update_stats)
    return add(h, positional_table(x.shape[-2], w.shape[1]))


def embed_words(ids, p: Mapping, mode: str = "infer", opts: EmbeddingOptions = WORD_DEFAULT,
                norm_state: Optional[BatchNormState] = None, row_mask=None,
                update_stats: bool = True) -> Tensor:
    """Word embedding as a row gather of ``W`` plus bias and positions."""
    ids = np.asarray(ids, dtype=np.int64)
    w = p["W"]
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise IndexError(f"token id out of vocabulary range [0, {w.shape[0]})")
    proj = add(take_rows(w, ids), p["b"])
    h = _post_projection(proj, p, opts, mode, norm_state, row_mask, update_stats)
    return add(h, positional_table(ids.shape[-1], w.shape[1]))
