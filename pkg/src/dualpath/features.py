"""Torch-side feature computation used inside the training graph.

The numpy pipeline in synth.py is the reference for offline feature
extraction; this module repeats the one-line fbank formula on tensors so
gradients can flow from the recognizer back into the enhancement mask.
Both sides share the same mel filter matrix.
"""
from __future__ import annotations

import numpy as np
import torch

from .config import CorpusConfig
from .synth import LOG_EPS, Spectrogram, mel_filterbank, stft_magnitude


class FeaturePipeline:
    """Caches the mel filter bank and framing parameters for one corpus."""

    def __init__(self, config: CorpusConfig):
        self.config = config
        self.n_bins = config.frame // 2 + 1
        fb = mel_filterbank(config.n_mels, self.n_bins, config.sample_rate)
        self.filters = torch.from_numpy(fb.astype(np.float32))

    def magnitudes(self, wave: np.ndarray) -> np.ndarray:
        """Offline STFT magnitudes as float32, shape (T, K)."""
        spec = stft_magnitude(wave, self.config.frame, self.config.hop)
        return spec.mags.astype(np.float32)

    def log_mel(self, mags: torch.Tensor) -> torch.Tensor:
        """log(mel(mags^2) + eps) along the last axis; differentiable."""
        filters = self.filters.to(dtype=mags.dtype)
        return torch.log(mags**2 @ filters.T + LOG_EPS)

    def spectrogram(self, mags: np.ndarray) -> Spectrogram:
        return Spectrogram(mags=np.asarray(mags, dtype=np.float64),
                           frame=self.config.frame, hop=self.config.hop)
