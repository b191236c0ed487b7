"""Central finite-difference check of full-model loss gradients (64-bit)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import MultiChannelSample, Vocabulary, collate, RESERVED
from .model import Model, ModelConfig
from .tensor import Tape, precision
from .training import LossConfig, batch_losses

EPSILON = 1e-5
TOLERANCE = 1e-4


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_address: str
    worst_index: tuple
    checked: int
    null_entries: int
    per_address: dict = field(default_factory=dict)
    loss: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def worst(self, k: int = 5) -> list:
        return sorted(self.per_address.items(), key=lambda kv: -kv[1])[:k]


def _loss_value(model: Model, batch, loss_cfg: LossConfig) -> float:
    loss, _, _ = batch_losses(model, batch, loss_cfg, "train", update_stats=False)
    return float(loss.data)


def check_gradients(model: Model, batch, loss_cfg: LossConfig, eps: float = EPSILON,
                    per_param: int = 1, seed: int = 0, noise_factor: float = 64.0) -> GradcheckReport:
    """Compare tape gradients with central differences on sampled entries.

    Each parameter contributes its largest-gradient entry plus ``per_param``
    random ones. Entries whose analytic and numeric values both sit below the
    differencing noise floor (``noise_factor * ulp(loss) / eps``) are counted
    as agreeing zeros; a wrong nonzero gradient never falls under that rule
    because its numeric partner stays large.
    """
    params = model.params
    for t in params.values():
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require a 64-bit model")
    params.zero_grad()
    with Tape() as tape:
        loss, _, _ = batch_losses(model, batch, loss_cfg, "train", update_stats=False)
    tape.backward(loss, params.values())
    f0 = float(loss.data)
    floor = noise_factor * np.spacing(max(1.0, abs(f0))) / eps
    rng = np.random.default_rng(seed)

    worst = (0.0, "", ())
    per_address: dict[str, float] = {}
    checked = nulls = 0
    for address, t in params.items():
        grad = t.grad
        flat = np.abs(grad).reshape(-1)
        picks = {int(np.argmax(flat))}
        picks.update(int(k) for k in rng.choice(flat.size, size=min(per_param, flat.size),
                                                replace=False))
        err_max = 0.0
        for k in sorted(picks):
            idx = np.unravel_index(k, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + eps
            up = _loss_value(model, batch, loss_cfg)
            t.data[idx] = orig - eps
            down = _loss_value(model, batch, loss_cfg)
            t.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grad[idx])
            checked += 1
            if abs(numeric) < floor and abs(analytic) < floor:
                nulls += 1
                err = 0.0
            else:
                err = relative_error(analytic, numeric)
            err_max = max(err_max, err)
            if err > worst[0]:
                worst = (err, address, tuple(int(i) for i in idx))
        per_address[address] = err_max
    params.zero_grad()
    return GradcheckReport(worst[0], worst[1], worst[2], checked, nulls, per_address, f0)


def tiny_config(n_channels: int = 2, anchoring: bool = True, fusion_mode: str = "multichannel",
                d_model: int = 8, vocab_size: int = 9) -> ModelConfig:
    dims = [5, 4, 6][:n_channels] if n_channels <= 3 else [4] * n_channels
    anchors = [(3 + i if anchoring and i != 1 else 0) for i in range(n_channels)]
    if anchoring and n_channels == 1:
        anchors = [3]
    return ModelConfig(channel_dims=dims, vocab_size=vocab_size, d_model=d_model, d_ff=2 * d_model,
                       enc_layers=2, dec_layers=2, anchor_classes=anchors, fusion_mode=fusion_mode)


def random_batch(config: ModelConfig, seed: int = 0, batch_size: int = 3):
    """Ragged random micro-batch matching ``config`` (64-bit features)."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(list(RESERVED) + [f"t{k}" for k in range(config.vocab_size - 4)])
    synchronous = config.fusion_mode == "early"
    samples = []
    for b in range(batch_size):
        base_len = int(rng.integers(2, 6))
        chans, anchors = [], []
        for i, dim in enumerate(config.channel_dims):
            t = base_len if synchronous else int(rng.integers(2, 6))
            chans.append(rng.normal(size=(t, dim)))
            g = config.anchor_classes[i]
            anchors.append(list(rng.integers(0, g, size=t)) if g else None)
        target = [vocab.tokens[int(k)] for k in rng.integers(4, config.vocab_size, size=rng.integers(1, 5))]
        samples.append(MultiChannelSample(f"r{b}", chans, target, anchors))
    return collate(samples, vocab, dtype=np.float64)


def run_check(config: ModelConfig, seed: int = 0, loss_cfg: Optional[LossConfig] = None,
              per_param: int = 1) -> GradcheckReport:
    """Build a 64-bit model from ``config`` and check it on a random micro-batch."""
    with precision(64):
        model = Model.build(config, seed)
        batch = random_batch(config, seed)
        loss_cfg = loss_cfg or LossConfig(lambda_t=1.0, lambda_a=0.15)
        return check_gradients(model, batch, loss_cfg, per_param=per_param, seed=seed)
