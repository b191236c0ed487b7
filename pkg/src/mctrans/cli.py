"""Command line entry point: synth, train, translate, evaluate, gradcheck.

Exit codes: 0 success, 1 check failure, 2 input/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck as gc
from .config import RunConfig, dump_config, load_config
from .data import (CorpusError, MultiChannelSample, build_vocab, load_corpus, split_corpus,
                   synth_generate, Vocabulary)
from .decoding import translate_corpus
from .metrics import bleu, rouge_l
from .model import CheckpointError, FusionError, Model, ModelConfig
from .tensor import ConfigError, NumericError, set_precision
from .training import OptimizerState, TrainingError, train_loop

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Input or configuration problem reported with exit code 2."""


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def select_channels(samples: Sequence[MultiChannelSample], channels: Optional[Sequence[int]]):
    if channels is None:
        return list(samples)
    n = len(samples[0].channels)
    for c in channels:
        if not 0 <= c < n:
            raise UsageError(f"channel {c} not present (corpus has {n} channels)")
    return [MultiChannelSample(s.id, [s.channels[c] for c in channels], s.target,
                               [s.anchor_labels[c] for c in channels]) for s in samples]


# ---------------------------------------------------------------------------
# synth


def run_synth(out: str, n: int, seed: int) -> int:
    if n < 1:
        _err("--n must be >= 1")
        return EXIT_INPUT
    try:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        samples = synth_generate(n, seed, out_dir)
    except OSError as e:
        _err(f"cannot write to {out}: {e}")
        return EXIT_INPUT
    parts = split_corpus(samples)
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _anchor_classes(cfg: RunConfig, train: list) -> list:
    n = len(train[0].channels)
    has = [all(s.anchor_labels[i] is not None for s in train) for i in range(n)]
    chan_names = cfg.data.channels or list(range(n))
    explicit = cfg.model.anchor_classes
    if explicit is not None:
        if len(explicit) != n:
            raise UsageError(f"anchor_classes lists {len(explicit)} entries for {n} channels")
        if cfg.loss.lambda_a > 0:
            for i, g in enumerate(explicit):
                if g > 0 and not has[i]:
                    raise UsageError(f"lambda_a > 0 but channel {chan_names[i]} has no anchor labels")
        return [int(g) for g in explicit]
    if cfg.loss.lambda_a == 0:
        return [0] * n
    return [int(max(max(s.anchor_labels[i]) for s in train)) + 1 if has[i] else 0 for i in range(n)]


def _model_config(cfg: RunConfig, channel_dims, vocab_size, anchors) -> ModelConfig:
    m = cfg.model
    return ModelConfig(channel_dims=list(channel_dims), vocab_size=vocab_size, d_model=m.d_model,
                       d_ff=m.d_ff, enc_layers=m.enc_layers, dec_layers=m.dec_layers, heads=m.heads,
                       anchor_classes=anchors, fusion_mode=m.fusion_mode,
                       channel_norm=m.channel_norm, channel_activation=m.channel_activation,
                       channel_scale=m.channel_scale, word_norm=m.word_norm,
                       word_activation=m.word_activation, word_scale=m.word_scale,
                       max_positions=m.max_positions)


def prepare_training(cfg: RunConfig):
    """Load corpora and derive vocab + model config; raises UsageError."""
    if cfg.data.train is None or cfg.data.dev is None:
        raise UsageError("config needs data.train and data.dev manifests")
    train = select_channels(load_corpus(cfg.resolve(cfg.data.train)), cfg.data.channels)
    dev = select_channels(load_corpus(cfg.resolve(cfg.data.dev)), cfg.data.channels)
    dims = [x.shape[1] for x in train[0].channels]
    for s in train + dev:
        if [x.shape[1] for x in s.channels] != dims:
            raise UsageError(f"sample {s.id}: channel dims differ from {dims}")
    if cfg.model.fusion_mode == "early":
        for s in train + dev:
            if len(set(s.lengths)) != 1:
                raise FusionError(f"early fusion needs frame-synchronous channels; sample {s.id} "
                                 f"has lengths {s.lengths}")
    vocab = build_vocab(train)
    anchors = _anchor_classes(cfg, train)
    for i, g in enumerate(anchors):
        if g and any(a >= g for s in train + dev if s.anchor_labels[i] is not None
                     for a in s.anchor_labels[i]):
            raise UsageError(f"channel {i} has anchor ids >= {g}")
    return train, dev, vocab, _model_config(cfg, dims, len(vocab), anchors)


def train_from_config(cfg: RunConfig, out_dir: Path, log=print):
    set_precision(cfg.precision)
    train, dev, vocab, model_cfg = prepare_training(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "resolved_config.yaml")
    (out_dir / "model_config.json").write_text(json.dumps(model_cfg.to_dict(), indent=2))
    model = Model.build(model_cfg, seed=cfg.seed)
    o = cfg.optimizer
    opt = OptimizerState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    ckpt = out_dir / "best.ckpt"
    with open(out_dir / "train.log", "w") as fh:
        def emit(line):
            fh.write(line + "\n")
            if log is not None:
                log(line)
        result = train_loop(model, train, dev, vocab, cfg.loss, cfg.train_config(), opt,
                            log=emit, checkpoint_path=ckpt)
    model.params = result.best_params
    model.save(ckpt, vocab.tokens, {"channels": cfg.data.channels, "step": result.best_step,
                                    "dev_bleu4": result.best_bleu,
                                    "max_len": cfg.decoding.max_len})
    return model, vocab, result


def run_train(config: str, out: Optional[str] = None) -> int:
    try:
        cfg = load_config(config)
        out_dir = Path(out) if out else cfg.resolve(cfg.out)
        _, _, result = train_from_config(cfg, out_dir)
    except (ConfigError, UsageError, CorpusError, FusionError) as e:
        _err(str(e))
        return EXIT_INPUT
    except (TrainingError, NumericError) as e:
        _err(f"numeric failure: {e}")
        return EXIT_NUMERIC
    print(f"done steps={result.steps} best_step={result.best_step} best_dev_bleu4={result.best_bleu:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# translate / evaluate


def _load_for_inference(checkpoint: str, manifest: str):
    try:
        model, tokens, extra = Model.load(checkpoint)
    except (OSError, CheckpointError, ConfigError) as e:
        raise UsageError(f"cannot load checkpoint {checkpoint}: {e}") from None
    if tokens is None:
        raise UsageError(f"checkpoint {checkpoint} carries no vocabulary")
    corpus = select_channels(load_corpus(manifest), extra.get("channels"))
    dims = model.config.channel_dims
    for s in corpus:
        got = [x.shape[1] for x in s.channels]
        if got != dims:
            raise UsageError(f"sample {s.id}: channel dims {got} do not match model dims {dims}")
        if model.config.fusion_mode == "early" and len(set(s.lengths)) != 1:
            raise FusionError(f"early fusion needs frame-synchronous channels; sample {s.id} "
                             f"has lengths {s.lengths}")
    set_precision(32 if model.params["out.W"].data.dtype == np.float32 else 64)
    return model, Vocabulary(tokens), corpus, extra


def run_translate(checkpoint: str, manifest: str, beam: int = 0, alpha: float = 0.0,
                  max_len: Optional[int] = None) -> int:
    if not 0 <= beam <= 10 or not 0 <= alpha <= 5:
        _err("beam must be in 0..10 and alpha in 0..5")
        return EXIT_INPUT
    try:
        model, vocab, corpus, extra = _load_for_inference(checkpoint, manifest)
    except (UsageError, CorpusError, FusionError) as e:
        _err(str(e))
        return EXIT_INPUT
    max_len = max_len or extra.get("max_len", 60)
    for words in translate_corpus(model, corpus, vocab, beam, alpha, max_len):
        print(" ".join(words))
    return EXIT_OK


def decoding_grid(model, corpus, vocab, widths, alphas, max_len: int = 60) -> list:
    """BLEU-4/ROUGE-L per (width, alpha) cell, in grid order."""
    cells = []
    greedy = None
    for w in widths:
        for a in alphas:
            if w <= 1:
                if greedy is None:
                    greedy = translate_corpus(model, corpus, vocab, 1, 0.0, max_len)
                hyps = greedy
            else:
                hyps = translate_corpus(model, corpus, vocab, w, a, max_len)
            pairs = [(h, s.target) for h, s in zip(hyps, corpus)]
            cells.append({"width": int(w), "alpha": a, "bleu4": bleu(pairs), "rougeL": rouge_l(pairs)})
    return cells


def best_cell(cells: list) -> dict:
    best = cells[0]
    for c in cells[1:]:
        if c["bleu4"] > best["bleu4"]:
            best = c
    return best


def run_evaluate(checkpoint: str, manifest: str, test_manifest: Optional[str] = None,
                 widths: Sequence[int] = tuple(range(11)), alphas: Sequence[float] = tuple(range(6)),
                 out: Optional[str] = None, max_len: Optional[int] = None) -> int:
    try:
        model, vocab, dev, extra = _load_for_inference(checkpoint, manifest)
        test = None
        if test_manifest:
            _, _, test, _ = _load_for_inference(checkpoint, test_manifest)
    except (UsageError, CorpusError, FusionError) as e:
        _err(str(e))
        return EXIT_INPUT
    max_len = max_len or extra.get("max_len", 60)
    cells = decoding_grid(model, dev, vocab, widths, alphas, max_len)
    for c in cells:
        print(f"cell width={c['width']} alpha={c['alpha']} bleu4={c['bleu4']:.4f} rougeL={c['rougeL']:.4f}")
    best = best_cell(cells)
    print(f"best width={best['width']} alpha={best['alpha']} bleu4={best['bleu4']:.4f} "
          f"rougeL={best['rougeL']:.4f}")
    report = {"grid": cells, "best": best}
    if test is not None:
        hyps = translate_corpus(model, test, vocab, best["width"], best["alpha"], max_len)
        pairs = [(h, s.target) for h, s in zip(hyps, test)]
        report["test"] = {"width": best["width"], "alpha": best["alpha"],
                          "bleu4": bleu(pairs), "rougeL": rouge_l(pairs)}
        print(f"test width={best['width']} alpha={best['alpha']} bleu4={report['test']['bleu4']:.4f} "
              f"rougeL={report['test']['rougeL']:.4f}")
    if out:
        Path(out).write_text(json.dumps(report, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_config(cfg: Optional[RunConfig]) -> tuple:
    if cfg is None:
        return gc.tiny_config(2, True), gc.LossConfig()
    m = cfg.model
    if m.d_model > 16:
        raise UsageError(f"gradcheck needs a tiny model (d_model <= 16), got {m.d_model}")
    dims = m.channel_dims or [5, 4]
    anchors = m.anchor_classes if m.anchor_classes is not None else [0] * len(dims)
    return _model_config(cfg, dims, m.vocab_size or 9, anchors), cfg.loss


def run_gradcheck(config: Optional[str] = None, seed: int = 0) -> int:
    try:
        cfg = load_config(config) if config else None
        model_cfg, loss_cfg = gradcheck_config(cfg)
        report = gc.run_check(model_cfg, seed=seed, loss_cfg=loss_cfg)
    except (ConfigError, UsageError) as e:
        _err(str(e))
        return EXIT_INPUT
    except NumericError as e:
        _err(f"numeric failure: {e}")
        return EXIT_NUMERIC
    where = ", ".join(str(i) for i in report.worst_index)
    print(f"checked={report.checked} null={report.null_entries} "
          f"max_rel_error={report.max_rel_error:.3e} worst={report.worst_address}[{where}]")
    if report.passed:
        print("gradcheck=pass")
        return EXIT_OK
    print("gradcheck=fail")
    for address, err in report.worst():
        if err >= gc.TOLERANCE:
            print(f"offender address={address} rel_error={err:.3e}")
    return EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mctrans", description="Multi-channel transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic two-channel corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=7)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")

    s = sub.add_parser("translate", help="translate a manifest to stdout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--beam", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--max-len", type=int)

    s = sub.add_parser("evaluate", help="sweep beam width and alpha on a dev manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--test-manifest")
    s.add_argument("--beam", type=int, nargs="+", default=list(range(11)),
                   help="beam widths to sweep (default 0..10)")
    s.add_argument("--alpha", type=float, nargs="+", default=[float(a) for a in range(6)],
                   help="alpha values to sweep (default 0..5)")
    s.add_argument("--out", help="write the JSON report here")
    s.add_argument("--max-len", type=int)

    s = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        return run_synth(args.out, args.n, args.seed)
    if args.command == "train":
        return run_train(args.config, args.out)
    if args.command == "translate":
        return run_translate(args.checkpoint, args.manifest, args.beam, args.alpha, args.max_len)
    if args.command == "evaluate":
        return run_evaluate(args.checkpoint, args.manifest, args.test_manifest, args.beam,
                            args.alpha, args.out, args.max_len)
    return run_gradcheck(args.config, args.seed)


if __name__ == "__main__":
    sys.exit(main())
