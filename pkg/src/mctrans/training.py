"""Losses, Xavier initialization, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import (ConfigError, NumericError, ShapeError, Tape, Tensor, add, log_softmax, mul,
                     pick, reshape, scale, tsum)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training cannot continue (e.g. a non-finite loss)."""


# ---------------------------------------------------------------------------
# initialization


def xavier_init(shape: Sequence[int], seed) -> np.ndarray:
    """Glorot-uniform sample in ±sqrt(6 / (fan_in + fan_out)).

    Shapes that are not 2-D fall back to a fan-in-only bound sqrt(3 / fan_in).
    """
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    if len(shape) == 2:
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    else:
        fan_in = shape[0] if shape else 1
        bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossConfig:
    lambda_t: float = 1.0
    lambda_a: float = 0.15
    normalization: str = "sequence"
    anchor_target_mode: str = "hard"

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_a < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.normalization not in ("sequence", "token"):
            raise ConfigError(f"normalization must be 'sequence' or 'token', got {self.normalization!r}")
        if self.anchor_target_mode not in ("hard", "soft"):
            raise ConfigError(f"anchor_target_mode must be 'hard' or 'soft', got {self.anchor_target_mode!r}")


def _batchify(logits: Tensor, targets: np.ndarray, mask):
    if logits.ndim == 2:
        logits = reshape(logits, (1,) + logits.shape)
        targets = targets[None]
        mask = None if mask is None else np.asarray(mask)[None]
    mask = np.ones(targets.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return logits, targets, mask


def _normalizer(mask: np.ndarray, normalization: str) -> float:
    if normalization == "sequence":
        return float(mask.shape[0])
    return float(mask.sum())


def translation_loss(logits: Tensor, targets, mask=None, normalization: str = "sequence") -> Tensor:
    """Token NLL of ``targets`` under softmax(logits), summed over real steps.

    ``logits`` is ``[B, U, G]`` (or ``[U, G]`` for one sentence). Sequence
    normalization divides by the batch size, token normalization by the
    number of non-pad steps.
    """
    targets = np.asarray(targets, dtype=np.int64)
    logits, targets, mask = _batchify(logits, targets, mask)
    if logits.shape[:2] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("target sequence without any non-pad token")
    if targets.max() >= logits.shape[-1] or targets.min() < 0:
        raise IndexError("target id outside the vocabulary")
    nll = pick(log_softmax(logits), targets)
    weights = mask.astype(logits.dtype) * (-1.0 / _normalizer(mask, normalization))
    return tsum(mul(nll, weights))


def translation_loss_product(probs: np.ndarray, targets) -> float:
    """Evaluation-only diagnostic ``1 - prod_u sum_g p(y_u^g) p̂(y_u^g)`` for one
    sentence with one-hot ground truth; ``probs`` is ``[U, G]``."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    return float(1.0 - np.prod(probs[np.arange(len(targets)), targets]))


def anchoring_loss(anchor_logits: Tensor, targets, mask=None, mode: str = "hard",
                   normalization: str = "sequence") -> Tensor:
    """Per-frame cross-entropy between softmaxed anchor logits and classifier
    targets: class ids (hard) or full distributions ``[..., T, G_i]`` (soft)."""
    n_classes = anchor_logits.shape[-1]
    targets = np.asarray(targets)
    if mode == "hard":
        targets = targets.astype(np.int64)
        valid = targets if mask is None else targets[np.asarray(mask, dtype=bool)]
        if valid.size and (valid.min() < 0 or valid.max() >= n_classes):
            raise IndexError(f"anchor class id outside [0, {n_classes})")
        targets = np.where(mask, targets, 0) if mask is not None else targets
        logits, targets, mask = _batchify(anchor_logits, targets, mask)
        nll = pick(log_softmax(logits), targets)
        weights = mask.astype(logits.dtype) * (-1.0 / _normalizer(mask, normalization))
        return tsum(mul(nll, weights))
    if mode != "soft":
        raise ConfigError(f"unknown anchor target mode {mode!r}")
    dist = targets.astype(anchor_logits.dtype)
    if dist.shape != anchor_logits.shape:
        raise ShapeError(f"soft targets {dist.shape} do not match logits {anchor_logits.shape}")
    rows = dist.sum(axis=-1)
    check = rows if mask is None else rows[np.asarray(mask, dtype=bool)]
    if np.any(np.abs(check - 1.0) > 1e-6) or np.any(dist < 0):
        raise ValueError("soft anchor targets must be distributions summing to 1")
    if anchor_logits.ndim == 2:
        mask = np.ones(dist.shape[:1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        norm = 1.0 if normalization == "sequence" else float(mask.sum())
    else:
        mask = np.ones(dist.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        norm = _normalizer(mask, normalization)
    weights = dist * mask[..., None] * (-1.0 / norm)
    return tsum(mul(log_softmax(anchor_logits), weights.astype(anchor_logits.dtype)))


def total_loss(l_t: Tensor, l_a: Sequence[Optional[Tensor]], cfg: LossConfig) -> Tensor:
    """λ_T·L_T + λ_A·Σ L_A,i; ``None`` entries (unanchored channels) are skipped."""
    total = scale(l_t, cfg.lambda_t)
    terms = [a for a in l_a if a is not None]
    if terms and cfg.lambda_a != 0:
        anchor_sum = terms[0]
        for a in terms[1:]:
            anchor_sum = add(anchor_sum, a)
        total = add(total, scale(anchor_sum, cfg.lambda_a))
    return total


def batch_losses(model, batch, loss_cfg: LossConfig, mode: str = "train",
                 update_stats: bool = True):
    """Forward a :class:`~mctrans.data.Batch` and return (total, L_T, [L_A,i])."""
    logits, enc = model.forward(batch.features, batch.channel_masks, batch.decoder_input,
                                mode, update_stats)
    l_t = translation_loss(logits, batch.decoder_target, batch.target_mask, loss_cfg.normalization)
    l_a = []
    for i, head in enumerate(enc.anchor_logits):
        if head is None or loss_cfg.lambda_a == 0:
            l_a.append(None)
            continue
        if batch.anchors[i] is None:
            raise ValueError(f"channel {i} has an anchor head but the batch carries no anchors")
        if loss_cfg.anchor_target_mode == "soft":
            targets = np.eye(head.shape[-1])[batch.anchors[i]]
        else:
            targets = batch.anchors[i]
        l_a.append(anchoring_loss(head, targets, batch.channel_masks[i],
                                  loss_cfg.anchor_target_mode, loss_cfg.normalization))
    return total_loss(l_t, l_a, loss_cfg), l_t, l_a


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: OptimizerState, clip_grad_norm: Optional[float] = None) -> None:
    """Adam with bias correction; weight decay enters as an L2 term on the gradient.

    ``params`` maps address -> Tensor; tensors without a grad are skipped.
    """
    items = [(a, t) for a, t in params.items() if t.grad is not None]
    for a, t in items:
        if t.grad.shape != t.data.shape:
            raise ShapeError(f"{a}: grad shape {t.grad.shape} != param shape {t.data.shape}")
    coef = 1.0
    if clip_grad_norm is not None:
        norm = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for _, t in items))
        if norm > clip_grad_norm:
            coef = clip_grad_norm / (norm + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, t in items:
        g = t.grad * coef
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        m = state.m.get(a)
        if m is None:
            m = state.m[a] = np.zeros_like(t.data)
            state.v[a] = np.zeros_like(t.data)
        v = state.v[a]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        if not (np.isfinite(v).all() and np.isfinite(update).all()):
            raise NumericError(f"{a}: optimizer moments overflowed")
        t.data = (t.data - update).astype(t.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# schedule


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` evaluations without a
    new best score."""

    def __init__(self, state: OptimizerState, patience: int = 8, factor: float = 0.5,
                 min_lr: float = 1e-6):
        self.state = state
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = -math.inf
        self.bad = 0

    def step(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.state.lr = max(self.state.lr * self.factor, self.min_lr)
            self.bad = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience: int = 25):
        self.patience = patience
        self.best = -math.inf
        self.bad = 0

    def step(self, score: float) -> bool:
        """Record a score; True when training should stop."""
        if score > self.best:
            self.best = score
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 3000
    eval_every: int = 100
    patience: int = 8
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    early_stop: int = 25
    log_every: int = 10
    max_decode_len: int = 60
    clip_grad_norm: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "eval_every", "patience", "early_stop", "log_every",
                     "max_decode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class TrainResult:
    best_params: object
    best_bleu: float
    best_step: int
    steps: int
    loss_trace: list
    evals: list
    stopped_early: bool
    log: list


def _fmt(**kv) -> str:
    parts = []
    for k, v in kv.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train_loop(model, corpus, dev, vocab, loss_cfg: LossConfig, train_cfg: TrainConfig,
               opt: Optional[OptimizerState] = None,
               evaluator: Optional[Callable] = None,
               log: Optional[Callable[[str], None]] = None,
               checkpoint_path=None) -> TrainResult:
    """Mini-batch training with periodic dev evaluation, plateau lr halving and
    early stopping on dev BLEU-4.

    ``evaluator(model)`` returns ``(bleu4, rouge_l)``; by default the dev set
    is greedily decoded. The best-BLEU parameters are kept (and written to
    ``checkpoint_path`` when given).
    """
    from .data import make_batches, seed_for
    from .decoding import evaluate_greedy

    if not corpus:
        raise ValueError("training corpus is empty")
    opt = opt or OptimizerState()
    sched = PlateauScheduler(opt, train_cfg.patience, train_cfg.lr_factor, train_cfg.min_lr)
    stopper = EarlyStopping(train_cfg.early_stop)
    if evaluator is None:
        def evaluator(m):
            return evaluate_greedy(m, dev, vocab, train_cfg.max_decode_len)

    lines: list[str] = []

    def emit(line: str) -> None:
        lines.append(line)
        if log is not None:
            log(line)
        logger.debug(line)

    params = model.params
    trace: list[float] = []
    evals: list[tuple] = []
    best = (-math.inf, 0, params.copy())
    step = 0
    epoch = 0
    stopped = False
    shuffle_seed = seed_for(train_cfg.seed, "shuffle")
    while step < train_cfg.max_steps and not stopped:
        batches = make_batches(corpus, vocab, train_cfg.batch_size, seed=[shuffle_seed, epoch])
        epoch += 1
        for batch in batches:
            params.zero_grad()
            try:
                with Tape() as tape:
                    loss, l_t, l_a = batch_losses(model, batch, loss_cfg, "train")
                tape.backward(loss, params.values())
            except NumericError as e:
                emit(_fmt(event="abort", step=step + 1, reason=str(e)))
                raise TrainingError(f"non-finite value at step {step + 1}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step + 1}")
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    adam_step(params, opt, train_cfg.clip_grad_norm)
            except NumericError as e:
                emit(_fmt(event="abort", step=step + 1, reason=str(e)))
                raise TrainingError(f"non-finite update at step {step + 1}: {e}") from e
            step += 1
            trace.append(value)
            if step % train_cfg.log_every == 0 or step == 1:
                anchor = sum(a.item() for a in l_a if a is not None)
                emit(_fmt(step=step, loss=value, trans=l_t.item(), anchor=float(anchor), lr=opt.lr))
            if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
                bleu4, rouge = evaluator(model)
                evals.append((step, bleu4, rouge))
                if bleu4 > best[0]:
                    best = (bleu4, step, params.copy())
                    if checkpoint_path is not None:
                        model.save(checkpoint_path, vocab.tokens if vocab is not None else None,
                                   {"step": step, "dev_bleu4": bleu4})
                sched.step(bleu4)
                emit(_fmt(event="eval", step=step, bleu4=float(bleu4), rougeL=float(rouge), lr=opt.lr))
                if stopper.step(bleu4):
                    emit(_fmt(event="early_stop", step=step, best_bleu4=float(best[0])))
                    stopped = True
            if stopped or step >= train_cfg.max_steps:
                break
    return TrainResult(best[2], best[0], best[1], step, trace, evals, stopped, lines)
