"""Corpus files, vocabulary, padded batching and the synthetic two-channel task.

Manifest: one JSON object per line::

    {"id": "s0001", "target": "w3 w7 w1",
     "channels": [{"path": "feats/s0001.c0.f32", "T": 4, "D": 16, "anchors": [3, 3, 1, 1]},
                  {"path": "feats/s0001.c1.f32", "T": 3, "D": 16}]}

Feature files are headerless little-endian float32, row-major ``[T, D]``.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD, BOS, EOS, UNK = range(4)

FEATURE_DTYPE = np.dtype("<f4")


class CorpusError(ValueError):
    """Invalid manifest or feature file."""


class CorruptFileError(CorpusError):
    """Feature file size disagrees with its declared shape."""


class EmptyCorpusError(CorpusError):
    pass


def seed_for(seed: int, name: str) -> list:
    """Named sub-seed derived from one global seed."""
    return [int(seed), zlib.crc32(name.encode())]


@dataclass
class MultiChannelSample:
    id: str
    channels: list
    target: list
    anchor_labels: Optional[list] = None

    def __post_init__(self):
        if self.anchor_labels is None:
            self.anchor_labels = [None] * len(self.channels)
        for i, x in enumerate(self.channels):
            if x.ndim != 2 or x.shape[0] < 1:
                raise CorpusError(f"sample {self.id}: channel {i} must be a non-empty [T, D] matrix")
            a = self.anchor_labels[i]
            if a is not None and len(a) != x.shape[0]:
                raise CorpusError(f"sample {self.id}: channel {i} has {x.shape[0]} frames "
                                  f"but {len(a)} anchor labels")

    @property
    def lengths(self) -> list:
        return [x.shape[0] for x in self.channels]


# ---------------------------------------------------------------------------
# feature files and manifests


def write_features(path, x: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(x, dtype=FEATURE_DTYPE).tobytes())


def read_features(path, t: int, d: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing feature file {path}")
    raw = path.read_bytes()
    if len(raw) != 4 * t * d:
        raise CorruptFileError(f"{path}: {len(raw)} bytes, expected 4*{t}*{d}={4 * t * d}")
    return np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(t, d).astype(np.float32)


def write_corpus(samples: Sequence[MultiChannelSample], out_dir, name: str) -> Path:
    """Write ``<name>.jsonl`` plus one feature file per sample channel."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / f"{name}.jsonl"
    lines = []
    for s in samples:
        chans = []
        for i, x in enumerate(s.channels):
            rel = f"{name}/{s.id}.c{i}.f32"
            write_features(out_dir / rel, x)
            entry = {"path": rel, "T": int(x.shape[0]), "D": int(x.shape[1])}
            if s.anchor_labels[i] is not None:
                entry["anchors"] = [int(a) for a in s.anchor_labels[i]]
            chans.append(entry)
        lines.append(json.dumps({"id": s.id, "target": " ".join(s.target), "channels": chans},
                                sort_keys=True))
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def _parse_line(line: str, lineno: int, base: Path) -> MultiChannelSample:
    where = f"manifest line {lineno}"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{where}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict) or not {"id", "target", "channels"} <= set(obj):
        raise CorpusError(f"{where}: needs keys id, target, channels")
    chans = obj["channels"]
    if not isinstance(chans, list) or not chans:
        raise CorpusError(f"{where}: channels must be a non-empty list")
    feats, anchors = [], []
    for i, c in enumerate(chans):
        try:
            t, d, rel = int(c["T"]), int(c["D"]), c["path"]
        except (KeyError, TypeError, ValueError):
            raise CorpusError(f"{where}: channel {i} needs path, T, D") from None
        if t < 1 or d < 1:
            raise CorpusError(f"{where}: channel {i} has non-positive shape ({t}, {d})")
        path = Path(rel) if Path(rel).is_absolute() else base / rel
        feats.append(read_features(path, t, d))
        a = c.get("anchors")
        if a is not None and len(a) != t:
            raise CorpusError(f"{where}: channel {i} has {len(a)} anchors for T={t}")
        anchors.append(None if a is None else [int(v) for v in a])
    target = str(obj["target"]).split()
    if not target:
        raise CorpusError(f"{where}: empty target")
    return MultiChannelSample(str(obj["id"]), feats, target, anchors)


def load_corpus(manifest) -> list:
    manifest = Path(manifest)
    if not manifest.exists():
        raise CorpusError(f"manifest {manifest} does not exist")
    base = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if line.strip():
            samples.append(_parse_line(line, lineno, base))
    if not samples:
        raise EmptyCorpusError(f"manifest {manifest} has no samples")
    n = len(samples[0].channels)
    for s in samples:
        if len(s.channels) != n:
            raise CorpusError(f"sample {s.id} has {len(s.channels)} channels, expected {n}")
    return samples


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise CorpusError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Sequence[MultiChannelSample], min_freq: int = 1) -> Vocabulary:
    """Reserved tokens, then words by descending frequency, ties lexicographic."""
    if not corpus:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for s in corpus for w in s.target)
    words = sorted((w for w, c in counts.items() if c >= min_freq and w not in RESERVED),
                   key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + words)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: list
    features: list          # per channel [B, T_max, D] float
    lengths: list           # per channel [B] int
    channel_masks: list     # per channel [B, T_max] bool
    anchors: list           # per channel [B, T_max] int or None
    targets: np.ndarray     # [B, U_max + 2] : <bos> ... <eos> <pad>...
    target_lengths: np.ndarray  # tokens incl. <eos>, excl. <bos>

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def decoder_input(self) -> np.ndarray:
        return self.targets[:, :-1]

    @property
    def decoder_target(self) -> np.ndarray:
        return self.targets[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.decoder_target != PAD

    def unbatch(self) -> list:
        """Per-sample unpadded channel features, recovered through the masks."""
        return [[f[b][m[b]] for f, m in zip(self.features, self.channel_masks)]
                for b in range(self.size)]


def collate(samples: Sequence[MultiChannelSample], vocab: Optional[Vocabulary],
            dtype=np.float32) -> Batch:
    n_ch = len(samples[0].channels)
    feats, lens, masks, anchors = [], [], [], []
    for i in range(n_ch):
        ls = np.array([s.channels[i].shape[0] for s in samples])
        dim = samples[0].channels[i].shape[1]
        block = np.zeros((len(samples), ls.max(), dim), dtype=dtype)
        mask = np.zeros((len(samples), ls.max()), dtype=bool)
        for b, s in enumerate(samples):
            block[b, :ls[b]] = s.channels[i]
            mask[b, :ls[b]] = True
        feats.append(block)
        lens.append(ls)
        masks.append(mask)
        if all(s.anchor_labels[i] is not None for s in samples):
            a = np.zeros((len(samples), ls.max()), dtype=np.int64)
            for b, s in enumerate(samples):
                a[b, :ls[b]] = s.anchor_labels[i]
            anchors.append(a)
        else:
            anchors.append(None)
    if vocab is not None:
        encoded = [vocab.encode(s.target) for s in samples]
    else:
        encoded = [[] for _ in samples]
    u = max(len(e) for e in encoded)
    targets = np.full((len(samples), u + 2), PAD, dtype=np.int64)
    for b, e in enumerate(encoded):
        targets[b, 0] = BOS
        targets[b, 1:len(e) + 1] = e
        targets[b, len(e) + 1] = EOS
    return Batch([s.id for s in samples], feats, lens, masks, anchors, targets,
                 np.array([len(e) + 1 for e in encoded]))


def make_batches(corpus: Sequence[MultiChannelSample], vocab: Optional[Vocabulary],
                 batch_size: int = 32, seed=0, shuffle: bool = True, dtype=None) -> list:
    """Seeded shuffle, then consecutive groups of ``batch_size``."""
    from .tensor import get_dtype

    order = np.arange(len(corpus))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    dtype = dtype or get_dtype()
    return [collate([corpus[k] for k in order[i:i + batch_size]], vocab, dtype)
            for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic asynchronous two-channel task

SYNTH_SYMBOLS = 12
SYNTH_DIM = 16
SYNTH_NOISE = 0.1
SYNTH_FRAMES = (2, 3)   # frames per carried symbol in channel A / channel B


def synth_token(k: int) -> str:
    return f"w{k:02d}"


def synth_sample(rng: np.random.Generator, sample_id: str) -> MultiChannelSample:
    """Target of 4-8 symbols; channel A carries even positions (2 frames each,
    with anchor labels), channel B odd positions (3 frames each)."""
    length = int(rng.integers(4, 9))
    symbols = rng.integers(0, SYNTH_SYMBOLS, size=length)
    chans, anchors = [], []
    for parity, frames in enumerate(SYNTH_FRAMES):
        carried = np.repeat(symbols[parity::2], frames)
        x = np.zeros((len(carried), SYNTH_DIM))
        x[np.arange(len(carried)), carried] = 1.0
        x += rng.normal(0.0, SYNTH_NOISE, size=x.shape)
        chans.append(x.astype(np.float32))
        anchors.append([int(c) for c in carried] if parity == 0 else None)
    return MultiChannelSample(sample_id, chans, [synth_token(int(k)) for k in symbols], anchors)


def synth_generate(n_samples: int, seed: int, out_dir=None) -> list:
    """Deterministic synthetic corpus; optionally written as train/dev/test
    manifests (80/10/10 split) under ``out_dir``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed_for(seed, "synth"))
    samples = [synth_sample(rng, f"syn{k:06d}") for k in range(n_samples)]
    if out_dir is not None:
        for name, part in split_corpus(samples).items():
            write_corpus(part, out_dir, name)
    return samples


def split_corpus(samples: list) -> dict:
    n = len(samples)
    n_train = n * 8 // 10
    n_dev = n // 10
    return {"train": samples[:n_train], "dev": samples[n_train:n_train + n_dev],
            "test": samples[n_train + n_dev:]}
