"""Bilingual hybrid-ASR acoustic modelling on synthetic corpora.

Modules: ``lexicon`` (grapheme units and the bilingual unit space),
``numcore`` (reverse-mode autodiff on numpy), ``model`` (shared + parallel
encoder streaming Transformer), ``training`` (staged training and
checkpoints), ``synthdata`` (synthetic corpora), ``decode_eval`` (decoding,
WER and reports), ``experiments`` (trend suite) and ``cli``.
"""

__version__ = "0.1.0"
