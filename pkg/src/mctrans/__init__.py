"""Multi-channel transformer: per-channel embeddings, channel-wise and
cross-channel encoder attention, multi-channel decoder attention, anchoring
losses, beam search and BLEU/ROUGE scoring on a small numpy autodiff core."""

from .data import Vocabulary, build_vocab, load_corpus, make_batches, synth_generate
from .decoding import beam_search, greedy_decode, length_penalty
from .metrics import bleu, rouge_l
from .model import Model, ModelConfig, ModelParams, build_model
from .tensor import Tape, Tensor, set_precision
from .training import LossConfig, TrainConfig, train_loop

__all__ = [
    "LossConfig", "Model", "ModelConfig", "ModelParams", "Tape", "Tensor", "TrainConfig",
    "Vocabulary", "beam_search", "bleu", "build_model", "build_vocab", "greedy_decode",
    "length_penalty", "load_corpus", "make_batches", "rouge_l", "set_precision",
    "synth_generate", "train_loop",
]
__version__ = "0.1.0"
