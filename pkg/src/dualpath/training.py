"""Multi-task objective, schedule, training loop, and checkpoints.

One optimizer drives the mask estimator, the fusion network, and the
recognizer jointly. Per step the noisy magnitudes run through enhancement
and fusion into the recognizer (fused branch); with dual-path training the
clean magnitudes run through the same recognizer (clean branch) and the
two branches are tied by the style and consistency penalties. Everything
is seeded: identical configs produce byte-identical logs and checkpoints.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import evaluation
from .asr import SpeechRecognizer, greedy_decode, prepare_targets, recognition_loss
from .config import (
    ExperimentConfig,
    LossWeights,
    TrainingConfig,
    experiment_from_dict,
    experiment_to_dict,
    parse_layer_selection,
)
from .enhance import MaskEstimator, enhancement_loss
from .errors import DivergenceError, InvalidInputError
from .features import FeaturePipeline
from .fusion import FusionNet
from .store import MAGIC_CHECKPOINT, read_container, write_container
from .style import batched_consistency_loss, batched_style_loss
from .synth import Corpus, Utterance, Vocabulary


def total_loss(loss_enh, loss_asr_c, loss_asr_f, loss_sl, loss_cl, weights: LossWeights):
    """Weighted multi-task objective.

    The recognition term is the convex combination
    (1 - lambda_fused) * loss_asr_c + lambda_fused * loss_asr_f, and the
    result is (1 - lambda_asr) * loss_enh + lambda_asr * that combination
    + lambda_sl * loss_sl + lambda_cl * loss_cl. Works on plain floats and
    on scalar tensors (stays differentiable).
    """
    values = {
        "loss_enh": loss_enh,
        "loss_asr_c": loss_asr_c,
        "loss_asr_f": loss_asr_f,
        "loss_sl": loss_sl,
        "loss_cl": loss_cl,
    }
    for name, value in values.items():
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not math.isfinite(v):
            raise InvalidInputError(f"{name} must be finite, got {v}")
        if v < 0:
            raise InvalidInputError(f"{name} must be non-negative, got {v}")
    for name in ("lambda_asr", "lambda_sl", "lambda_cl", "lambda_fused"):
        if getattr(weights, name) < 0:
            raise InvalidInputError(f"{name} must be non-negative")
    loss_asr = (1.0 - weights.lambda_fused) * loss_asr_c + weights.lambda_fused * loss_asr_f
    return (
        (1.0 - weights.lambda_asr) * loss_enh
        + weights.lambda_asr * loss_asr
        + weights.lambda_sl * loss_sl
        + weights.lambda_cl * loss_cl
    )


def learning_rate(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warmup to peak_lr, then inverse square-root decay.

    Continuous at the boundary: step == warmup gives exactly peak_lr.
    """
    if warmup < 1:
        raise InvalidInputError(f"warmup must be >= 1, got {warmup}")
    if not peak_lr > 0:
        raise InvalidInputError(f"peak_lr must be > 0, got {peak_lr}")
    if step < 1:
        raise InvalidInputError(f"step must be >= 1, got {step}")
    if step <= warmup:
        return peak_lr * (step / warmup)
    return peak_lr * math.sqrt(warmup / step)


class DualPathSystem(torch.nn.Module):
    """Mask estimator + fusion network + shared recognizer as one module."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        self.features = FeaturePipeline(config.corpus)
        self.vocab = Vocabulary(config.corpus.n_content_tokens)
        self.enhancer = MaskEstimator(
            n_bins=self.features.n_bins,
            hidden=config.enhancer.hidden,
            n_layers=config.enhancer.n_layers,
        )
        self.fusion = FusionNet(config.fusion.blocks, config.fusion.channels)
        self.asr = SpeechRecognizer(
            n_mels=config.corpus.n_mels,
            vocab_size=self.vocab.size,
            config=config.asr,
        )

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def fused_path(self, noisy_mags: torch.Tensor, frame_mask: Optional[torch.Tensor] = None):
        """Noisy magnitudes to fused features; the whole inference front.

        Returns a dict with enhanced magnitudes, both feature maps, the
        fused features, and the merge gate. Never touches clean data.
        """
        lengths = frame_mask.to(torch.long).sum(dim=1) if frame_mask is not None else None
        mask = self.enhancer(noisy_mags, lengths)
        enhanced = mask * noisy_mags
        keep = None
        if frame_mask is not None:
            # log of the padded zero rows is a large negative constant, not
            # zero; silence those frames so convolutions see plain padding.
            keep = frame_mask.to(noisy_mags.dtype).unsqueeze(-1)
        feats_noisy = self.features.log_mel(noisy_mags)
        feats_enh = self.features.log_mel(enhanced)
        if keep is not None:
            feats_noisy = feats_noisy * keep
            feats_enh = feats_enh * keep
        fused, gate, residual = self.fusion(feats_enh, feats_noisy)
        return {
            "mask": mask,
            "enhanced": enhanced,
            "feats_noisy": feats_noisy,
            "feats_enhanced": feats_enh,
            "fused": fused,
            "gate": gate,
            "residual": residual,
        }

    def clean_features(self, clean_mags: torch.Tensor, frame_mask: Optional[torch.Tensor] = None):
        feats = self.features.log_mel(clean_mags)
        if frame_mask is not None:
            feats = feats * frame_mask.to(feats.dtype).unsqueeze(-1)
        return feats


@dataclass
class Batch:
    """Padded tensors for one batch of utterances."""

    uids: list
    token_seqs: list
    noisy_mags: torch.Tensor
    clean_mags: torch.Tensor
    frame_mask: torch.Tensor
    targets_in: torch.Tensor
    targets_out: torch.Tensor
    target_mask: torch.Tensor


class FeatureCache:
    """Memoizes per-utterance STFT magnitudes as float32 tensors."""

    def __init__(self, features: FeaturePipeline):
        self.features = features
        self._store: dict = {}

    def magnitudes(self, utt: Utterance):
        hit = self._store.get(utt.uid)
        if hit is None:
            clean = torch.from_numpy(self.features.magnitudes(utt.clean_wave))
            noisy = torch.from_numpy(self.features.magnitudes(utt.noisy_wave))
            hit = (clean, noisy)
            self._store[utt.uid] = hit
        return hit


def collate(utts: Sequence[Utterance], cache: FeatureCache, vocab: Vocabulary) -> Batch:
    """Pad a list of utterances to the batch maximum frame count."""
    if len(utts) == 0:
        raise InvalidInputError("cannot collate an empty batch")
    mags = [cache.magnitudes(u) for u in utts]
    lengths = [m[0].shape[0] for m in mags]
    t_max = max(lengths)
    n_bins = mags[0][0].shape[1]
    b = len(utts)
    clean = torch.zeros(b, t_max, n_bins)
    noisy = torch.zeros(b, t_max, n_bins)
    frame_mask = torch.zeros(b, t_max, dtype=torch.bool)
    for i, (c, n) in enumerate(mags):
        t = lengths[i]
        clean[i, :t] = c
        noisy[i, :t] = n
        frame_mask[i, :t] = True
    targets_in, targets_out, target_mask = prepare_targets(
        [u.tokens for u in utts], vocab
    )
    return Batch(
        uids=[u.uid for u in utts],
        token_seqs=[list(u.tokens) for u in utts],
        noisy_mags=noisy,
        clean_mags=clean,
        frame_mask=frame_mask,
        targets_in=targets_in,
        targets_out=targets_out,
        target_mask=target_mask,
    )


def make_batches(utts: Sequence, batch_size: int) -> list:
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    return [list(utts[i : i + batch_size]) for i in range(0, len(utts), batch_size)]


def _abort_if_nonfinite(components: dict) -> None:
    for name, value in components.items():
        if not bool(torch.isfinite(value.detach())):
            raise DivergenceError(
                f"{name} is non-finite",
                step=None,
                components={k: float(v.detach()) for k, v in components.items()},
            )


def compute_losses(
    system: DualPathSystem,
    batch: Batch,
    cfg: TrainingConfig,
    layer_sel: Optional[Sequence[int]] = None,
):
    """Forward both branches and assemble every loss component.

    Returns (total, components) where components maps the metric-log names
    to scalar tensors. With dual_path off the clean branch never runs and
    the recognition term is the fused loss alone.
    """
    vocab = system.vocab
    front = system.fused_path(batch.noisy_mags, batch.frame_mask)
    loss_enh = enhancement_loss(front["enhanced"], batch.clean_mags, batch.frame_mask)
    states_f = system.asr.encode(front["fused"], batch.frame_mask)
    scores_f = system.asr.decode(states_f, batch.targets_in)
    loss_asr_f = recognition_loss(scores_f, batch.targets_out, vocab.pad_id)
    zero = torch.zeros((), dtype=loss_asr_f.dtype)
    weights = cfg.weights
    if cfg.dual_path:
        feats_c = system.clean_features(batch.clean_mags, batch.frame_mask)
        states_c = system.asr.encode(feats_c, batch.frame_mask)
        scores_c = system.asr.decode(states_c, batch.targets_in)
        loss_asr_c = recognition_loss(scores_c, batch.targets_out, vocab.pad_id)
        # A diverged forward pass must abort as a divergence, not as an
        # input-validation failure inside the style terms, so check the
        # branch losses before computing them.
        _abort_if_nonfinite(
            {
                "loss_enh": loss_enh,
                "loss_asr_c": loss_asr_c,
                "loss_asr_f": loss_asr_f,
                "loss_sl": zero,
                "loss_cl": zero,
            }
        )
        if cfg.use_sl:
            if layer_sel is None:
                layer_sel = parse_layer_selection(
                    cfg.layer_selection, system.asr.n_encoder_layers
                )
            loss_sl = batched_style_loss(
                states_c.layers,
                states_f.layers,
                states_f.lengths,
                sel=layer_sel,
                stop_clean_gradient=cfg.stop_clean_gradient,
            )
        else:
            loss_sl = zero
        if cfg.use_cl:
            loss_cl = batched_consistency_loss(
                scores_c,
                scores_f,
                batch.target_mask,
                stop_clean_gradient=cfg.stop_clean_gradient,
            )
        else:
            loss_cl = zero
    else:
        loss_asr_c = zero
        loss_sl = zero
        loss_cl = zero
        weights = dataclasses.replace(weights, lambda_fused=1.0)
    components = {
        "loss_enh": loss_enh,
        "loss_asr_c": loss_asr_c,
        "loss_asr_f": loss_asr_f,
        "loss_sl": loss_sl,
        "loss_cl": loss_cl,
    }
    _abort_if_nonfinite(components)
    total = total_loss(
        loss_enh, loss_asr_c, loss_asr_f, loss_sl, loss_cl, weights
    )
    return total, components


def train_step(
    system: DualPathSystem,
    batch: Batch,
    optimizer: torch.optim.Optimizer,
    cfg: TrainingConfig,
    layer_sel: Optional[Sequence[int]] = None,
    step: Optional[int] = None,
) -> dict:
    """One joint update of all unfrozen parameters; returns loss metrics."""
    try:
        total, components = compute_losses(system, batch, cfg, layer_sel)
    except DivergenceError as err:
        raise DivergenceError(str(err), step=step, components=err.components) from None
    if not bool(torch.isfinite(total.detach())):
        raise DivergenceError(
            "total loss is non-finite",
            step=step,
            components={k: float(v.detach()) for k, v in components.items()},
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    metrics = {name: float(value.detach()) for name, value in components.items()}
    metrics["loss_total"] = float(total.detach())
    return metrics


def build_system(config: ExperimentConfig, seed: Optional[int] = None) -> DualPathSystem:
    """Seed torch and construct the three sub-networks."""
    torch.manual_seed(config.training.seed if seed is None else seed)
    return DualPathSystem(config)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    records: list
    best_valid_ter: Optional[float]
    best_epoch: Optional[int]
    config: ExperimentConfig


def save_checkpoint(
    path,
    system: DualPathSystem,
    config: ExperimentConfig,
    step: int = 0,
    epoch: int = 0,
    valid_ter: Optional[float] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    """Write parameters (and optimizer moments) into one container file."""
    arrays = {}
    for name, tensor in system.state_dict().items():
        arrays[f"model/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    adam_steps = {}
    if optimizer is not None:
        name_of = {id(p): n for n, p in system.named_parameters()}
        for param, state in optimizer.state.items():
            pname = name_of.get(id(param))
            if pname is None or "exp_avg" not in state:
                continue
            arrays[f"adam/{pname}/exp_avg"] = (
                state["exp_avg"].detach().cpu().numpy().astype("<f4")
            )
            arrays[f"adam/{pname}/exp_avg_sq"] = (
                state["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
            )
            s = state.get("step", 0)
            adam_steps[pname] = int(s.item() if torch.is_tensor(s) else s)
    meta = {
        "kind": "dual-path checkpoint",
        "config": experiment_to_dict(config),
        "step": step,
        "epoch": epoch,
        "valid_ter": valid_ter,
        "adam_steps": adam_steps,
    }
    write_container(path, MAGIC_CHECKPOINT, meta, arrays)


def load_checkpoint(path):
    """Rebuild the system from a checkpoint file.

    Returns (system, config, meta); the system comes back in eval mode.
    """
    meta, arrays = read_container(path, expected_magic=MAGIC_CHECKPOINT)
    config = experiment_from_dict(meta["config"])
    system = DualPathSystem(config)
    state = {}
    for name, arr in arrays.items():
        if name.startswith("model/"):
            state[name[len("model/") :]] = torch.from_numpy(np.array(arr, copy=True))
    system.load_state_dict(state)
    system.eval()
    return system, config, meta


def _write_metrics(path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_training(
    config: ExperimentConfig,
    corpus: Corpus,
    out_dir,
    seed: Optional[int] = None,
) -> TrainResult:
    """Full training loop: per-epoch validation, best-TER checkpointing.

    The model with the lowest fused-path validation TER is the one kept;
    ties keep the earlier epoch. A metrics record is appended per step and
    the validation score fills valid_ter on each epoch's final record.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        config = config.replace_training(seed=seed)
    tcfg = config.training
    for split in ("train", "valid"):
        if len(corpus.split(split)) == 0:
            raise InvalidInputError(f"corpus split {split!r} is empty")
    layer_sel = parse_layer_selection(tcfg.layer_selection, config.asr.enc_layers)
    system = build_system(config)
    system.train()
    for name in tcfg.freeze:
        getattr(system, {"enhancer": "enhancer", "fusion": "fusion", "asr": "asr"}[name]).requires_grad_(False)
    params = [p for p in system.parameters() if p.requires_grad]
    if not params:
        raise InvalidInputError("every module is frozen; nothing to train")
    optimizer = torch.optim.Adam(params, lr=tcfg.peak_lr)
    cache = FeatureCache(system.features)
    train_utts = corpus.split("train")
    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.bin"
    records: list = []
    best_ter: Optional[float] = None
    best_epoch: Optional[int] = None
    if tcfg.epochs == 0:
        _write_metrics(metrics_path, records)
        save_checkpoint(checkpoint_path, system, config, optimizer=optimizer)
        return TrainResult(
            checkpoint_path, metrics_path, records, None, None, config
        )
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        shuffle = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((tcfg.seed, epoch)))
        )
        order = shuffle.permutation(len(train_utts))
        batches = make_batches([train_utts[i] for i in order], tcfg.batch_size)
        for bi, chunk in enumerate(batches):
            step += 1
            lr = learning_rate(step, tcfg.peak_lr, tcfg.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = collate(chunk, cache, system.vocab)
            metrics = train_step(system, batch, optimizer, tcfg, layer_sel, step)
            valid_ter = None
            if bi == len(batches) - 1:
                valid_ter = evaluation.corpus_ter(
                    system, corpus, "valid", cache=cache,
                    batch_size=tcfg.batch_size, max_len=tcfg.max_decode_len,
                )
                if best_ter is None or valid_ter < best_ter:
                    best_ter = valid_ter
                    best_epoch = epoch
                    save_checkpoint(
                        checkpoint_path, system, config,
                        step=step, epoch=epoch, valid_ter=valid_ter,
                        optimizer=optimizer,
                    )
            record = {"step": step, "epoch": epoch, "lr": lr}
            record.update(metrics)
            record["valid_ter"] = valid_ter
            records.append(record)
    _write_metrics(metrics_path, records)
    return TrainResult(
        checkpoint_path, metrics_path, records, best_ter, best_epoch, config
    )
