"""Encoder-decoder recognizer over log-mel features.

One instance serves both branches of dual-path training: clean and fused
features are pushed through the same parameters, and the encoder exposes
every block's output so per-layer statistics can be compared across the two
branches. The decoder is autoregressive with teacher forcing at train time
and greedy search at test time. All padding conventions here take a frame
mask with True marking valid frames; padded positions are zeroed so batched
and single-utterance runs agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AsrConfig
from .errors import InvalidInputError
from .synth import Vocabulary

# Finite stand-in for -inf so fully masked softmax rows stay finite instead
# of collapsing to NaN; exp(-1e30) underflows to exactly zero in float32/64.
NEG_MASK_VALUE = -1e30


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype, device) -> torch.Tensor:
    """Standard sin/cos position table of shape (length, dim)."""
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angle = position * torch.exp(half * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim - dim // 2])
    return table


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with explicit, finite masking.

    key_padding_mask uses True for positions to ignore. Masked logits are
    set to a large negative constant rather than -inf, so a row with every
    key masked produces a uniform (and later discarded) output instead of
    NaN that would bleed through the convolutions.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise InvalidInputError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_padding_mask: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> torch.Tensor:
        b, tq, dim = query.shape
        tk = key.shape[1]
        q = self.q_proj(query).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], NEG_MASK_VALUE
            )
        if causal:
            future = torch.ones(tq, tk, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, NEG_MASK_VALUE)
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(b, tq, dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ff_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ff_dim),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(ff_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise, pointwise stack over the time axis."""

    def __init__(self, dim: int, kernel: int = 7, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dw = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pw2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, keep: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pw1(h), dim=1)
        if keep is not None:
            # The norm and the pointwise conv both carry bias terms that
            # revive padded frames; silence them here so the depthwise kernel
            # cannot smear padding into real frames.
            h = h * keep.transpose(1, 2)
        h = F.silu(self.dw(h))
        h = self.pw2(h)
        return self.dropout(h.transpose(1, 2))


class EncoderBlock(nn.Module):
    """Pre-norm block: self-attention, convolution module, feed-forward.

    Each block ends with a LayerNorm, as in the convolution-augmented
    encoder it follows. Besides matching that design, the trailing norm
    keeps every exposed layer output on a stationary scale, so Gram
    statistics compared across layers and training stages stay bounded
    instead of growing with the residual stream.
    """

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.conv = ConvModule(dim, dropout=dropout)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(
        self,
        x: torch.Tensor,
        pad_mask: Optional[torch.Tensor],
        keep: Optional[torch.Tensor],
    ) -> torch.Tensor:
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, key_padding_mask=pad_mask)
        x = x + self.conv(x, keep)
        x = x + self.ff(self.ff_norm(x))
        x = self.out_norm(x)
        if keep is not None:
            x = x * keep
        return x


class DecoderBlock(nn.Module):
    """Pre-norm block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        memory_pad_mask: Optional[torch.Tensor],
    ) -> torch.Tensor:
        h = self.self_norm(x)
        x = x + self.self_attn(h, h, h, causal=True)
        h = self.cross_norm(x)
        x = x + self.cross_attn(h, memory, memory, key_padding_mask=memory_pad_mask)
        x = x + self.ff(self.ff_norm(x))
        return x


@dataclass
class EncoderStates:
    """Everything the encoder produces for one batch of feature maps.

    layers holds each block's output (B, T', D) with padded frames zeroed;
    memory is the final-normalized top, pad_mask is True at padded frames,
    lengths counts valid downsampled frames per utterance.
    """

    layers: list
    memory: torch.Tensor
    pad_mask: Optional[torch.Tensor]
    lengths: torch.Tensor


class SpeechRecognizer(nn.Module):
    """Stride-2 conv front end, deep encoder, shallow causal decoder."""

    def __init__(
        self,
        n_mels: int = 40,
        vocab_size: int = 19,
        config: Optional[AsrConfig] = None,
    ):
        super().__init__()
        config = config or AsrConfig()
        self.config = config
        self.n_mels = n_mels
        self.vocab_size = vocab_size
        dim = config.dim
        self.front = nn.Conv1d(n_mels, dim, 3, stride=2, padding=1)
        self.encoder_blocks = nn.ModuleList(
            EncoderBlock(dim, config.heads, config.ff_dim, config.dropout)
            for _ in range(config.enc_layers)
        )
        self.encoder_norm = nn.LayerNorm(dim)
        self.embed = nn.Embedding(vocab_size, dim)
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(dim, config.heads, config.ff_dim, config.dropout)
            for _ in range(config.dec_layers)
        )
        self.decoder_norm = nn.LayerNorm(dim)
        self.output_proj = nn.Linear(dim, vocab_size)

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder_blocks)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_features(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        if feats.dim() != 3 or feats.shape[-1] != self.n_mels:
            raise InvalidInputError(
                f"features must be (B, T, {self.n_mels}), got {tuple(feats.shape)}"
            )
        return feats

    def encode(
        self, feats: torch.Tensor, frame_mask: Optional[torch.Tensor] = None
    ) -> EncoderStates:
        """Run the front end and every encoder block.

        frame_mask is (B, T) with True marking valid input frames; when
        omitted all frames count. Valid lengths are downsampled with the
        stride-2 front end: t frames become (t + 1) // 2.
        """
        feats = self._check_features(feats)
        b, t, _ = feats.shape
        dtype = feats.dtype
        if frame_mask is not None:
            if frame_mask.shape != (b, t):
                raise InvalidInputError(
                    f"frame_mask shape {tuple(frame_mask.shape)} does not match "
                    f"features {(b, t)}"
                )
            feats = feats * frame_mask.to(dtype).unsqueeze(-1)
            lengths = frame_mask.to(torch.long).sum(dim=1)
        else:
            lengths = torch.full((b,), t, dtype=torch.long, device=feats.device)
        x = F.silu(self.front(feats.transpose(1, 2))).transpose(1, 2)
        t_down = x.shape[1]
        down_lengths = (lengths + 1) // 2
        if frame_mask is not None:
            positions = torch.arange(t_down, device=feats.device)
            pad_mask = positions[None, :] >= down_lengths[:, None]
            keep = (~pad_mask).to(dtype).unsqueeze(-1)
            x = x * keep
        else:
            pad_mask = None
            keep = None
        x = x + sinusoidal_positions(t_down, x.shape[-1], dtype, feats.device)
        if keep is not None:
            x = x * keep
        layers = []
        for block in self.encoder_blocks:
            x = block(x, pad_mask, keep)
            layers.append(x)
        memory = self.encoder_norm(x)
        if keep is not None:
            memory = memory * keep
        return EncoderStates(
            layers=layers, memory=memory, pad_mask=pad_mask, lengths=down_lengths
        )

    def decode(
        self,
        states: EncoderStates,
        targets_in: torch.Tensor,
        return_hidden: bool = False,
    ):
        """Teacher-forced decoder pass.

        targets_in is (B, U) of token ids starting with the start symbol.
        Returns pre-softmax scores (B, U, V); with return_hidden also the
        list of per-block hidden states (B, U, D).
        """
        if targets_in.dim() == 1:
            targets_in = targets_in.unsqueeze(0)
        if targets_in.dim() != 2 or targets_in.shape[1] < 1:
            raise InvalidInputError(
                f"targets_in must be (B, U) with U >= 1, got {tuple(targets_in.shape)}"
            )
        dtype = states.memory.dtype
        u = targets_in.shape[1]
        x = self.embed(targets_in) * math.sqrt(self.config.dim)
        x = x.to(dtype) + sinusoidal_positions(u, self.config.dim, dtype, x.device)
        hidden = []
        for block in self.decoder_blocks:
            x = block(x, states.memory, states.pad_mask)
            hidden.append(x)
        scores = self.output_proj(self.decoder_norm(x))
        if return_hidden:
            return scores, hidden
        return scores

    def forward(
        self,
        feats: torch.Tensor,
        targets_in: torch.Tensor,
        frame_mask: Optional[torch.Tensor] = None,
    ):
        states = self.encode(feats, frame_mask)
        scores = self.decode(states, targets_in)
        return scores, states


def prepare_targets(
    token_seqs: Sequence[Sequence[int]], vocab: Vocabulary, device=None
):
    """Build shifted decoder inputs and padded reference outputs.

    Returns (targets_in, targets_out, target_mask): targets_in starts with
    the start symbol, targets_out ends with the end symbol, both padded to
    the batch maximum with the pad symbol. target_mask is True where
    targets_out holds a real symbol.
    """
    if len(token_seqs) == 0:
        raise InvalidInputError("token_seqs must be non-empty")
    lens = [len(seq) + 1 for seq in token_seqs]
    u = max(lens)
    b = len(token_seqs)
    targets_in = torch.full((b, u), vocab.pad_id, dtype=torch.long, device=device)
    targets_out = torch.full((b, u), vocab.pad_id, dtype=torch.long, device=device)
    for i, seq in enumerate(token_seqs):
        seq = list(seq)
        for tok in seq:
            if not (0 <= tok < vocab.size):
                raise InvalidInputError(f"token id {tok} outside vocabulary")
        targets_in[i, 0] = vocab.start_id
        if seq:
            targets_in[i, 1 : len(seq) + 1] = torch.as_tensor(seq, device=device)
            targets_out[i, : len(seq)] = torch.as_tensor(seq, device=device)
        targets_out[i, len(seq)] = vocab.end_id
    target_mask = targets_out != vocab.pad_id
    return targets_in, targets_out, target_mask


def recognition_loss(
    scores: torch.Tensor, targets_out: torch.Tensor, pad_id: int
) -> torch.Tensor:
    """Cross entropy over non-pad target positions, averaged per token."""
    if scores.dim() == 2:
        scores = scores.unsqueeze(0)
    if targets_out.dim() == 1:
        targets_out = targets_out.unsqueeze(0)
    if scores.shape[:2] != targets_out.shape:
        raise InvalidInputError(
            f"scores {tuple(scores.shape)} do not align with targets "
            f"{tuple(targets_out.shape)}"
        )
    return F.cross_entropy(
        scores.reshape(-1, scores.shape[-1]),
        targets_out.reshape(-1),
        ignore_index=pad_id,
    )


@torch.no_grad()
def greedy_decode(
    model: SpeechRecognizer,
    feats: torch.Tensor,
    vocab: Vocabulary,
    frame_mask: Optional[torch.Tensor] = None,
    max_len: int = 12,
) -> list:
    """Argmax decoding until the end symbol or max_len tokens.

    Returns one token-id list per utterance, start/end symbols stripped.
    The start and pad symbols are barred from the argmax so hypotheses stay
    inside the writable vocabulary.
    """
    if max_len <= 0:
        raise InvalidInputError(f"max_len must be positive, got {max_len}")
    was_training = model.training
    model.eval()
    try:
        states = model.encode(feats, frame_mask)
        b = states.memory.shape[0]
        device = states.memory.device
        tokens = torch.full((b, 1), vocab.start_id, dtype=torch.long, device=device)
        finished = torch.zeros(b, dtype=torch.bool, device=device)
        outputs = [[] for _ in range(b)]
        for _ in range(max_len):
            scores = model.decode(states, tokens)[:, -1, :]
            scores[:, vocab.start_id] = NEG_MASK_VALUE
            scores[:, vocab.pad_id] = NEG_MASK_VALUE
            step = scores.argmax(dim=-1)
            for i in range(b):
                if finished[i]:
                    continue
                tok = int(step[i])
                if tok == vocab.end_id:
                    finished[i] = True
                else:
                    outputs[i].append(tok)
            if bool(finished.all()):
                break
            step = torch.where(
                finished, torch.full_like(step, vocab.end_id), step
            )
            tokens = torch.cat([tokens, step.unsqueeze(1)], dim=1)
        return outputs
    finally:
        if was_training:
            model.train()
