"""Multi-channel encoder/decoder assembly, fusion baselines and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .attention import (channel_self_attention_block, linear, masked_target_self_attention,
                        multichannel_decoder_attention, multichannel_encoder_attention)
from .embeddings import T_MAX, EmbeddingOptions, embed_channel, embed_words
from .tensor import BatchNormState, ConfigError, ShapeError, Tensor, concat, get_dtype, log_softmax
from .training import xavier_init

FUSION_MODES = ("multichannel", "early", "late", "single")
PAD, BOS, EOS, UNK = 0, 1, 2, 3


class FusionError(ValueError):
    """Channels cannot be fused as requested (e.g. unequal lengths)."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    channel_dims: list
    vocab_size: int
    d_model: int = 128
    d_ff: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 1
    anchor_classes: Optional[list] = None
    fusion_mode: str = "multichannel"
    channel_norm: str = "batch"
    channel_activation: str = "softsign"
    channel_scale: bool = False
    word_norm: str = "none"
    word_activation: str = "none"
    word_scale: bool = False
    max_positions: int = T_MAX

    def __post_init__(self):
        self.channel_dims = [int(d) for d in self.channel_dims]
        if not self.channel_dims or any(d < 1 for d in self.channel_dims):
            raise ConfigError(f"channel_dims must be non-empty positive ints, got {self.channel_dims}")
        if self.anchor_classes is None:
            self.anchor_classes = [0] * len(self.channel_dims)
        self.anchor_classes = [int(g) for g in self.anchor_classes]
        if len(self.anchor_classes) != len(self.channel_dims):
            raise ConfigError("anchor_classes must list one entry per channel")
        if any(g < 0 for g in self.anchor_classes):
            raise ConfigError("anchor class counts must be >= 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.fusion_mode == "single" and self.n_channels != 1:
            raise ConfigError("fusion_mode 'single' takes exactly one channel")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("enc_layers and dec_layers must be >= 1")
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError(f"d_model must be a positive even int, got {self.d_model}")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be >= 1")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the 4 reserved tokens plus one word")
        self.channel_options  # validates switches

    @property
    def n_channels(self) -> int:
        return len(self.channel_dims)

    @property
    def channel_options(self) -> EmbeddingOptions:
        return EmbeddingOptions(self.channel_norm, self.channel_activation, self.channel_scale)

    @property
    def word_options(self) -> EmbeddingOptions:
        return EmbeddingOptions(self.word_norm, self.word_activation, self.word_scale)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def submodel(self, channel: int) -> "ModelConfig":
        """Single-channel config for one late-fusion branch."""
        return dataclasses.replace(self, channel_dims=[self.channel_dims[channel]],
                                   anchor_classes=[self.anchor_classes[channel]],
                                   fusion_mode="single")


class ModelParams:
    """Flat address -> Tensor store plus batch-norm running statistics."""

    def __init__(self, tensors: Optional[dict] = None, norm_states: Optional[dict] = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.norm_states: dict[str, BatchNormState] = dict(norm_states or {})

    def __getitem__(self, address: str) -> Tensor:
        return self.tensors[address]

    def __contains__(self, address: str) -> bool:
        return address in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype,
                             name=k)
                   for k, v in self.tensors.items()}
        states = {k: dataclasses.replace(s, running_mean=s.running_mean.copy(),
                                         running_var=s.running_var.copy())
                  for k, s in self.norm_states.items()}
        return ModelParams(tensors, states)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


class ParamView(Mapping):
    """Prefix-scoped read view over :class:`ModelParams`."""

    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix + "." if prefix else ""

    def __getitem__(self, key: str) -> Tensor:
        return self.params.tensors[self.prefix + key]

    def __contains__(self, key) -> bool:
        return self.prefix + key in self.params.tensors

    def __iter__(self):
        n = len(self.prefix)
        return (k[n:] for k in self.params.tensors if k.startswith(self.prefix))

    def __len__(self):
        return sum(1 for _ in self)

    def scope(self, name: str) -> "ParamView":
        return ParamView(self.params, self.prefix + name)

    def norm_state(self, name: str) -> Optional[BatchNormState]:
        return self.params.norm_states.get(self.prefix + name)


# ---------------------------------------------------------------------------
# parameter layout


def _attn_shapes(d: int) -> dict:
    return {"W_q": (d, d), "b_q": (d,), "W_k": (d, d), "b_k": (d,), "W_v": (d, d), "b_v": (d,),
            "attn_ln.gamma": (d,), "attn_ln.beta": (d,)}


def _ff_shapes(d: int, f: int) -> dict:
    return {"ff.W1": (d, f), "ff.b1": (f,), "ff.W2": (f, d), "ff.b2": (d,),
            "ff_ln.gamma": (d,), "ff_ln.beta": (d,)}


def _block_shapes(d: int, f: int) -> dict:
    return {**_attn_shapes(d), **_ff_shapes(d, f)}


def _layout(cfg: ModelConfig, with_output: bool = True) -> tuple[dict, list]:
    """Address -> shape map and the list of norm-state addresses."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {}
    norms: list[str] = []
    if cfg.fusion_mode == "late":
        for i in range(cfg.n_channels):
            sub_shapes, sub_norms = _layout(cfg.submodel(i), with_output=False)
            shapes.update({f"late.m{i}.{k}": v for k, v in sub_shapes.items()})
            norms.extend(f"late.m{i}.{k}" for k in sub_norms)
        shapes["out.W"] = (cfg.n_channels * d, cfg.vocab_size)
        shapes["out.b"] = (cfg.vocab_size,)
        return shapes, norms

    streams = [sum(cfg.channel_dims)] if cfg.fusion_mode == "early" else cfg.channel_dims
    for i, dim in enumerate(streams):
        shapes[f"emb.ch{i}.W"] = (dim, d)
        shapes[f"emb.ch{i}.b"] = (d,)
        if cfg.channel_norm == "batch":
            shapes[f"emb.ch{i}.bn.gamma"] = (d,)
            shapes[f"emb.ch{i}.bn.beta"] = (d,)
            norms.append(f"emb.ch{i}.bn")
    for l in range(cfg.enc_layers):
        for i in range(len(streams)):
            blocks = ("cs", "me") if cfg.fusion_mode == "multichannel" else ("cs",)
            for blk in blocks:
                for k, v in _block_shapes(d, f).items():
                    shapes[f"enc.layer{l}.ch{i}.{blk}.{k}"] = v
    for i, g in enumerate(cfg.anchor_classes):
        if g > 0:
            shapes[f"anchor.ch{i}.W"] = (d, g)
            shapes[f"anchor.ch{i}.b"] = (g,)
    shapes["dec.emb.W"] = (cfg.vocab_size, d)
    shapes["dec.emb.b"] = (d,)
    if cfg.word_norm == "batch":
        shapes["dec.emb.bn.gamma"] = (d,)
        shapes["dec.emb.bn.beta"] = (d,)
        norms.append("dec.emb.bn")
    for l in range(cfg.dec_layers):
        for k, v in _attn_shapes(d).items():
            shapes[f"dec.layer{l}.sa.{k}"] = v
        md = {"W_q": (d, d), "b_q": (d,), "attn_ln.gamma": (d,), "attn_ln.beta": (d,),
              **_ff_shapes(d, f)}
        for i in range(len(streams)):
            md.update({f"ch{i}.W_k": (d, d), f"ch{i}.b_k": (d,),
                       f"ch{i}.W_v": (d, d), f"ch{i}.b_v": (d,)})
        for k, v in md.items():
            shapes[f"dec.layer{l}.md.{k}"] = v
    if with_output:
        shapes["out.W"] = (d, cfg.vocab_size)
        shapes["out.b"] = (cfg.vocab_size,)
    return shapes, norms


def _init_value(address: str, shape: tuple, seed: int) -> np.ndarray:
    leaf = address.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    return xavier_init(shape, [seed, zlib.crc32(address.encode())])


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: Xavier-uniform weights, zero biases, unit norm gains.

    Each tensor draws from its own stream keyed by (seed, address), so values
    do not depend on construction order.
    """
    shapes, norms = _layout(config)
    dtype = get_dtype()
    tensors = {a: Tensor(_init_value(a, s, seed).astype(dtype), requires_grad=True, name=a)
               for a, s in shapes.items()}
    states = {a: BatchNormState.fresh(config.d_model, dtype) for a in norms}
    return ModelParams(tensors, states)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class EncoderOutput:
    h_e: list
    masks: list
    anchor_logits: list
    parts: Optional[list] = None  # per-branch outputs under late fusion

    @property
    def batch_size(self) -> int:
        if self.parts is not None:
            return self.parts[0].batch_size
        return self.h_e[0].shape[0]

    def take(self, rows) -> "EncoderOutput":
        """Gather batch rows (inference only; nothing is recorded)."""
        rows = np.asarray(rows, dtype=np.int64)
        if self.parts is not None:
            return EncoderOutput([], [], [], [p.take(rows) for p in self.parts])
        h_e = [Tensor(h.data[rows], dtype=h.data.dtype) for h in self.h_e]
        masks = [None if m is None else m[rows] for m in self.masks]
        return EncoderOutput(h_e, masks, [None] * len(self.anchor_logits))


def _as_batch_tensor(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 3:
        raise ShapeError(f"channel input must be [batch, time, dim], got {t.shape}")
    return t


def _lengths(mask, x: Tensor) -> np.ndarray:
    if mask is None:
        return np.full(x.shape[0], x.shape[1])
    return np.asarray(mask, dtype=bool).sum(axis=-1)


class Model:
    """Parameters plus the forward computations selected by ``fusion_mode``."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config, build_model(config, seed))

    # -- encoder ----------------------------------------------------------

    def encode(self, channels: Sequence, masks: Optional[Sequence] = None, mode: str = "infer",
               update_stats: bool = True) -> EncoderOutput:
        cfg = self.config
        xs = [_as_batch_tensor(x) for x in channels]
        if len(xs) != cfg.n_channels:
            raise ShapeError(f"expected {cfg.n_channels} channels, got {len(xs)}")
        masks = list(masks) if masks is not None else [None] * len(xs)
        for i, (x, dim) in enumerate(zip(xs, cfg.channel_dims)):
            if x.shape[-1] != dim:
                raise ShapeError(f"channel {i} has feature dim {x.shape[-1]}, config expects {dim}")
        if cfg.fusion_mode == "late":
            parts = [_encode_streams(self.params.scope(f"late.m{i}"), cfg.submodel(i), [x], [m],
                                     mode, update_stats)
                     for i, (x, m) in enumerate(zip(xs, masks))]
            return EncoderOutput([], [], [a for p in parts for a in p.anchor_logits], parts)
        if cfg.fusion_mode == "early":
            xs, masks = _fuse_early(xs, masks)
        return _encode_streams(self.params.scope(""), cfg, xs, masks, mode, update_stats)

    # -- decoder ----------------------------------------------------------

    def decoder_states(self, enc: EncoderOutput, y_in, mode: str = "infer",
                       update_stats: bool = True) -> Tensor:
        """Final decoder hidden states h^d, ``[batch, U, d_model]``
        (``[batch, U, N*d_model]`` under late fusion)."""
        cfg = self.config
        y_in = np.asarray(y_in, dtype=np.int64)
        if cfg.fusion_mode == "late":
            states = [_decode_states(self.params.scope(f"late.m{i}"), cfg.submodel(i), part, y_in,
                                     mode, update_stats)
                      for i, part in enumerate(enc.parts)]
            return concat(states, axis=-1)
        return _decode_states(self.params.scope(""), cfg, enc, y_in, mode, update_stats)

    def decode(self, enc: EncoderOutput, y_in, mode: str = "infer",
               update_stats: bool = True) -> Tensor:
        """Vocabulary logits ``[batch, U, G]`` (softmax is left to the caller)."""
        h = self.decoder_states(enc, y_in, mode, update_stats)
        return linear(h, self.params["out.W"], self.params["out.b"])

    def forward(self, channels, masks, y_in, mode: str = "train", update_stats: bool = True):
        enc = self.encode(channels, masks, mode, update_stats)
        return self.decode(enc, y_in, mode, update_stats), enc

    def next_token_logprobs(self, enc: EncoderOutput, prefixes) -> np.ndarray:
        """Log-probabilities of the next token for every prefix row.

        A batch-1 encoding is shared across all prefixes.
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if enc.batch_size == 1 and prefixes.shape[0] != 1:
            enc = enc.take(np.zeros(prefixes.shape[0], dtype=np.int64))
        logits = self.decode(enc, prefixes, mode="infer")
        return log_softmax(Tensor(logits.data[:, -1, :], dtype=logits.data.dtype)).data

    # -- persistence ------------------------------------------------------

    def save(self, path, vocab: Optional[Sequence[str]] = None, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.config, self.params, vocab, extra)

    @classmethod
    def load(cls, path) -> tuple["Model", Optional[list], dict]:
        config, params, vocab, extra = load_checkpoint(path)
        return cls(config, params), vocab, extra


def _fuse_early(xs: list, masks: list):
    lengths = [_lengths(m, x) for x, m in zip(xs, masks)]
    for i in range(1, len(xs)):
        if xs[i].shape[1] != xs[0].shape[1] or not np.array_equal(lengths[i], lengths[0]):
            raise FusionError(
                f"early fusion needs frame-synchronous channels; channel 0 and channel {i} "
                f"have lengths {lengths[0].tolist()} vs {lengths[i].tolist()}")
    return [concat(xs, axis=-1)], [masks[0]]


def _encode_streams(p: ParamView, cfg: ModelConfig, xs: list, masks: list, mode: str,
                    update_stats: bool) -> EncoderOutput:
    hs = []
    for i, (x, m) in enumerate(zip(xs, masks)):
        if x.shape[1] == 0:
            raise ValueError(f"channel {i} is empty")
        emb = p.scope(f"emb.ch{i}")
        hs.append(embed_channel(x, emb, mode, cfg.channel_options, emb.norm_state("bn"),
                                row_mask=m, update_stats=update_stats))
    for l in range(cfg.enc_layers):
        layer = p.scope(f"enc.layer{l}")
        hs = [channel_self_attention_block(h, layer.scope(f"ch{i}.cs"), masks[i], cfg.heads)
              for i, h in enumerate(hs)]
        if cfg.fusion_mode == "multichannel":
            hs = multichannel_encoder_attention(
                hs, [layer.scope(f"ch{i}.me") for i in range(len(hs))], masks, cfg.heads)
    anchors = []
    for i, g in enumerate(cfg.anchor_classes):
        if g > 0:
            head = p.scope(f"anchor.ch{i}")
            anchors.append(linear(hs[min(i, len(hs) - 1)], head["W"], head["b"]))
        else:
            anchors.append(None)
    return EncoderOutput(hs, masks, anchors)


def _decode_states(p: ParamView, cfg: ModelConfig, enc: EncoderOutput, y_in: np.ndarray,
                   mode: str, update_stats: bool) -> Tensor:
    if y_in.ndim != 2:
        raise ShapeError(f"target ids must be [batch, U], got shape {y_in.shape}")
    emb = p.scope("dec.emb")
    h = embed_words(y_in, emb, mode, cfg.word_options, emb.norm_state("bn"),
                    update_stats=update_stats)
    for l in range(cfg.dec_layers):
        layer = p.scope(f"dec.layer{l}")
        h = masked_target_self_attention(h, layer.scope("sa"), cfg.heads)
        h = multichannel_decoder_attention(h, enc.h_e, layer.scope("md"), enc.masks, cfg.heads)
    return h


# functional entry points ---------------------------------------------------


def encode(model: Model, channels, masks=None, mode: str = "infer") -> EncoderOutput:
    return model.encode(channels, masks, mode)


def decode_forward(model: Model, enc_out: EncoderOutput, y_in, mode: str = "infer") -> Tensor:
    y_in = np.asarray(y_in, dtype=np.int64)
    if y_in.size and np.any(y_in[..., 0] != BOS):
        raise ValueError("decoder input must start with <bos>")
    return model.decode(enc_out, y_in, mode)


def early_fusion_forward(model: Model, channels, masks, y_in, mode: str = "infer") -> Tensor:
    if model.config.fusion_mode != "early":
        raise ConfigError("model was not built for early fusion")
    logits, _ = model.forward(channels, masks, y_in, mode)
    return logits


def late_fusion_forward(model: Model, channels, masks, y_in, mode: str = "infer") -> Tensor:
    if model.config.fusion_mode != "late":
        raise ConfigError("model was not built for late fusion")
    if len(channels) != model.config.n_channels:
        raise ShapeError(f"{len(channels)} channels for {model.config.n_channels} late-fusion branches")
    logits, _ = model.forward(channels, masks, y_in, mode)
    return logits


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic  b"MCTRCKPT"
#   u32    format version
#   u32    header length, then UTF-8 JSON header (config, vocab, dtype, extra)
#   u32    blob count
#   blob:  u16 address length, address, u8 kind (0 param, 1 norm buffer),
#          u8 ndim, u32 dims..., little-endian float32 data row-major

MAGIC = b"MCTRCKPT"
FORMAT_VERSION = 1


def _write_blob(buf, address: str, kind: int, arr: np.ndarray) -> None:
    name = address.encode()
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    buf.write(struct.pack("<BB", kind, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, config: ModelConfig, params: ModelParams,
                    vocab: Optional[Sequence[str]] = None, extra: Optional[dict] = None) -> None:
    dtype = next(iter(params.values())).data.dtype if len(params) else np.dtype(get_dtype())
    header = json.dumps({"config": config.to_dict(), "vocab": list(vocab) if vocab else None,
                         "dtype": str(np.dtype(dtype)), "extra": extra or {}},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    blobs = [(a, 0, t.data) for a, t in params.items()]
    for a, s in params.norm_states.items():
        blobs.append((a + ".running_mean", 1, s.running_mean))
        blobs.append((a + ".running_var", 1, s.running_var))
    buf.write(struct.pack("<I", len(blobs)))
    for a, kind, arr in blobs:
        _write_blob(buf, a, kind, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    try:
        version, hlen = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(bytes(view[pos:pos + hlen]).decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dtype = np.dtype(header["dtype"])
        config = ModelConfig.from_dict(header["config"])
        tensors, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            address = bytes(view[pos:pos + nlen]).decode()
            pos += nlen
            kind, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(dtype)
            pos += 4 * n
            if kind == 0:
                tensors[address] = Tensor(arr, requires_grad=True, dtype=dtype, name=address)
            else:
                buffers[address] = arr
    except (struct.error, ValueError, KeyError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    shapes, norms = _layout(config)
    if set(shapes) != set(tensors):
        raise CheckpointError(f"{path}: parameter set does not match its config")
    states = {a: BatchNormState(buffers[a + ".running_mean"], buffers[a + ".running_var"])
              for a in norms}
    ordered = {a: tensors[a] for a in shapes}
    return config, ModelParams(ordered, states), header["vocab"], header["extra"]
