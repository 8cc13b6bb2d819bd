"""Mask-based speech enhancement front-end.

A bidirectional recurrent stack followed by a rectified linear projection
predicts a non-negative mask over noisy STFT magnitudes; the enhanced
magnitude is the elementwise product. The training loss is plain MSE on
magnitudes, with padded frames excluded in batched mode.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError
from .synth import Spectrogram


def _as_tensor(x, name: str) -> torch.Tensor:
    if isinstance(x, Spectrogram):
        x = x.mags
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() not in (2, 3):
        raise InvalidInputError(f"{name} must be (T, K) or (B, T, K), got shape {tuple(x.shape)}")
    return x


class MaskEstimator(nn.Module):
    """Bidirectional LSTM stack + linear projection + ReLU mask head.

    The rectifier leaves the mask unbounded above on purpose; the product
    with the noisy magnitudes is what the MSE loss constrains.
    """

    def __init__(self, n_bins: int = 101, hidden: int = 64, n_layers: int = 2):
        super().__init__()
        self.n_bins = n_bins
        self.rnn = nn.LSTM(
            n_bins, hidden, n_layers, bidirectional=True, batch_first=True
        )
        self.proj = nn.Linear(2 * hidden, n_bins)

    def forward(
        self, mags: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> torch.Tensor:
        squeeze = mags.dim() == 2
        if squeeze:
            mags = mags.unsqueeze(0)
        if lengths is not None:
            # Pack so the backward recurrence starts at each utterance's last
            # real frame instead of at the batch padding.
            packed = nn.utils.rnn.pack_padded_sequence(
                mags, lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            h, _ = self.rnn(packed)
            h, _ = nn.utils.rnn.pad_packed_sequence(
                h, batch_first=True, total_length=mags.shape[1]
            )
        else:
            h, _ = self.rnn(mags)
        mask = F.relu(self.proj(h))
        return mask.squeeze(0) if squeeze else mask

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def estimate_mask(noisy, model: MaskEstimator) -> torch.Tensor:
    """Predict a non-negative mask with the same shape as the input."""
    x = _as_tensor(noisy, "noisy")
    if x.shape[-1] != model.n_bins:
        raise InvalidInputError(
            f"input has {x.shape[-1]} bins, model expects {model.n_bins}"
        )
    return model(x.to(next(model.parameters()).dtype))


def apply_mask(noisy, mask) -> torch.Tensor:
    """Elementwise product of noisy magnitudes and mask."""
    x = _as_tensor(noisy, "noisy")
    m = mask if isinstance(mask, torch.Tensor) else _as_tensor(mask, "mask")
    if x.shape != m.shape:
        raise InvalidInputError(f"shape mismatch: noisy {tuple(x.shape)} vs mask {tuple(m.shape)}")
    return x.to(m.dtype) * m


def enhancement_loss(enhanced, clean, frame_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over magnitude entries.

    With a boolean frame_mask (batched, shape (B, T)), padded frames are
    excluded from the mean.
    """
    e = enhanced if isinstance(enhanced, torch.Tensor) else _as_tensor(enhanced, "enhanced")
    c = _as_tensor(clean, "clean").to(e.dtype)
    if e.shape != c.shape:
        raise InvalidInputError(f"shape mismatch: enhanced {tuple(e.shape)} vs clean {tuple(c.shape)}")
    sq = (e - c) ** 2
    if frame_mask is None:
        return sq.mean()
    valid = frame_mask.unsqueeze(-1).to(e.dtype)
    return (sq * valid).sum() / (valid.sum() * e.shape[-1])
