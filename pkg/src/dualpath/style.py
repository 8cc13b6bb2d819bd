"""Cross-branch regularizers over encoder embeddings and decoder scores.

Two penalties tie the fused branch to the clean branch. The style penalty
compares channel-correlation (Gram) matrices of encoder layer embeddings,
which discards temporal order and keeps only how feature channels co-vary.
The consistency penalty compares decoder output rows as distributions with
a symmetric KL divergence. Both treat the clean branch as the reference:
by default no gradient flows into the clean-side operands.
"""
from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError


def _as_matrix(x, name: str) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() != 2:
        raise InvalidInputError(f"{name} must be a 2-d matrix, got {tuple(x.shape)}")
    if not bool(torch.isfinite(x.detach()).all()):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def style_matrix(embedding) -> torch.Tensor:
    """Channel-correlation matrix of a T x D embedding: transpose(E) @ E.

    Symmetric and positive semidefinite by construction, and invariant to
    any reordering of the T frames.
    """
    e = _as_matrix(embedding, "embedding")
    return e.transpose(0, 1) @ e


def style_loss(
    clean_embs: Sequence,
    fused_embs: Sequence,
    sel: Optional[Iterable[int]] = None,
    stop_clean_gradient: bool = True,
) -> torch.Tensor:
    """Mean squared Frobenius gap between per-layer style matrices.

    clean_embs and fused_embs hold one T x D embedding per encoder layer.
    sel selects 1-based layer indices (default: every layer); the sum of
    squared differences is divided by len(sel) * D * D so the value stays
    comparable across layer subsets and widths. With stop_clean_gradient
    the clean-side matrices act as constant targets.
    """
    if len(clean_embs) != len(fused_embs):
        raise InvalidInputError(
            f"layer count mismatch: {len(clean_embs)} clean vs {len(fused_embs)} fused"
        )
    n_layers = len(clean_embs)
    if n_layers == 0:
        raise InvalidInputError("need at least one layer embedding")
    if sel is None:
        indices = list(range(1, n_layers + 1))
    else:
        indices = sorted(set(int(i) for i in sel))
    if not indices:
        raise InvalidInputError("layer selection is empty")
    for i in indices:
        if not 1 <= i <= n_layers:
            raise InvalidInputError(f"layer index {i} outside 1..{n_layers}")
    total = None
    dim = None
    for i in indices:
        e_c = _as_matrix(clean_embs[i - 1], f"clean_embs[{i - 1}]")
        e_f = _as_matrix(fused_embs[i - 1], f"fused_embs[{i - 1}]")
        if e_c.shape[1] != e_f.shape[1]:
            raise InvalidInputError(
                f"layer {i}: width mismatch {e_c.shape[1]} vs {e_f.shape[1]}"
            )
        if dim is None:
            dim = e_c.shape[1]
        elif e_c.shape[1] != dim:
            raise InvalidInputError("layer widths differ across selected layers")
        s_c = style_matrix(e_c)
        if stop_clean_gradient:
            s_c = s_c.detach()
        s_f = style_matrix(e_f)
        gap = ((s_c - s_f) ** 2).sum()
        total = gap if total is None else total + gap
    return total / (len(indices) * dim * dim)


def consistency_loss(
    d_c, d_f, stop_clean_gradient: bool = True
) -> torch.Tensor:
    """Symmetric KL between decoder score rows, averaged over rows.

    d_c and d_f are U x V pre-softmax scores; each row is normalized with a
    softmax before the divergence so the inputs may stay raw. The result is
    symmetric in its arguments and zero exactly when the normalized rows
    agree. With stop_clean_gradient the clean-side rows act as targets.
    """
    c = _as_matrix(d_c, "d_c")
    f_ = _as_matrix(d_f, "d_f")
    if c.shape != f_.shape:
        raise InvalidInputError(
            f"score shape mismatch: {tuple(c.shape)} vs {tuple(f_.shape)}"
        )
    if stop_clean_gradient:
        c = c.detach()
    log_p = F.log_softmax(c, dim=-1)
    log_q = F.log_softmax(f_, dim=-1)
    p = log_p.exp()
    q = log_q.exp()
    kl_pq = (p * (log_p - log_q)).sum(dim=-1)
    kl_qp = (q * (log_q - log_p)).sum(dim=-1)
    return (kl_pq + kl_qp).mean()


def batched_style_loss(
    clean_layers: Sequence[torch.Tensor],
    fused_layers: Sequence[torch.Tensor],
    lengths: torch.Tensor,
    sel: Optional[Iterable[int]] = None,
    stop_clean_gradient: bool = True,
) -> torch.Tensor:
    """Per-utterance style loss averaged over a batch.

    clean_layers and fused_layers hold (B, T', D) tensors per layer;
    lengths gives each utterance's valid frame count, and only those frames
    enter the correlation matrices.
    """
    if len(clean_layers) != len(fused_layers):
        raise InvalidInputError("layer count mismatch between branches")
    b = clean_layers[0].shape[0]
    total = None
    for i in range(b):
        t = int(lengths[i])
        value = style_loss(
            [layer[i, :t] for layer in clean_layers],
            [layer[i, :t] for layer in fused_layers],
            sel=sel,
            stop_clean_gradient=stop_clean_gradient,
        )
        total = value if total is None else total + value
    return total / b


def batched_consistency_loss(
    d_c: torch.Tensor,
    d_f: torch.Tensor,
    target_mask: torch.Tensor,
    stop_clean_gradient: bool = True,
) -> torch.Tensor:
    """Consistency loss over every real target row in a batch.

    d_c and d_f are (B, U, V) scores; target_mask is (B, U) with True at
    real (non-pad) positions. Rows from all utterances pool into one mean
    so the value matches the per-token recognition loss convention.
    """
    if d_c.shape != d_f.shape:
        raise InvalidInputError(
            f"score shape mismatch: {tuple(d_c.shape)} vs {tuple(d_f.shape)}"
        )
    if target_mask.shape != d_c.shape[:2]:
        raise InvalidInputError(
            f"target_mask {tuple(target_mask.shape)} does not match scores "
            f"{tuple(d_c.shape[:2])}"
        )
    rows = target_mask.reshape(-1)
    if not bool(rows.any()):
        raise InvalidInputError("target_mask selects no rows")
    c = d_c.reshape(-1, d_c.shape[-1])[rows]
    f_ = d_f.reshape(-1, d_f.shape[-1])[rows]
    return consistency_loss(c, f_, stop_clean_gradient=stop_clean_gradient)
