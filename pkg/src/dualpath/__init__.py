"""Dual-path noise-robust speech recognition at desk scale.

A synthetic noisy-speech corpus is cleaned by a mask-based enhancer, the
enhanced and noisy feature maps are merged by a gated fusion network, and a
single shared-parameter encoder-decoder recognizer is trained on the clean
and fused branches jointly. Style (channel-correlation) and consistency
(symmetric-KL) penalties pull the fused branch toward the clean one; at
inference the clean branch is discarded.
"""

__version__ = "0.1.0"

from .config import (
    AsrConfig,
    CorpusConfig,
    EnhancerConfig,
    ExperimentConfig,
    FusionConfig,
    LossWeights,
    TrainingConfig,
)
from .errors import DivergenceError, FormatError, InvalidInputError
from .synth import Corpus, Utterance, Vocabulary, make_corpus

__all__ = [
    "AsrConfig",
    "Corpus",
    "CorpusConfig",
    "DivergenceError",
    "EnhancerConfig",
    "ExperimentConfig",
    "FormatError",
    "FusionConfig",
    "InvalidInputError",
    "LossWeights",
    "TrainingConfig",
    "Utterance",
    "Vocabulary",
    "make_corpus",
    "__version__",
]
