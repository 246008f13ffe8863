"""Desk-scale BERT: WordPiece tokenization, MLM/NSP pre-training, a Transformer
encoder on a small reverse-mode autodiff core, task heads, and ablation harnesses."""

from .model import BERT_BASE, BERT_LARGE, ModelConfig, count_parameters, encoder_forward, init_weights
from .tokenizer import Vocab, WordPieceTokenizer, encode_pair, load_vocab, wordpiece

__version__ = "0.1.0"

__all__ = [
    "BERT_BASE",
    "BERT_LARGE",
    "ModelConfig",
    "Vocab",
    "WordPieceTokenizer",
    "count_parameters",
    "encode_pair",
    "encoder_forward",
    "init_weights",
    "load_vocab",
    "wordpiece",
]
