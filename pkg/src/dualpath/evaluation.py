"""Scoring, ablation sweeps, and embedding dumps.

Token error rate is the reported metric: the synthetic vocabulary has no
words, so substitutions, deletions, and insertions are counted over content
tokens. The ablation harness trains named variants across seeds and
renders a fixed-width comparison table; embedding dumps capture both
branches of the recognizer for later heat-map rendering.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import DivergenceError, InvalidInputError
from .store import MAGIC_EMBEDDINGS, read_container, write_container


@dataclass(frozen=True)
class EditCounts:
    """Breakdown of one minimum-cost alignment."""

    distance: int
    substitutions: int
    deletions: int
    insertions: int
    matches: int


def edit_distance(hyp: Sequence, ref: Sequence) -> EditCounts:
    """Minimum edit distance with a deterministic alignment breakdown.

    Unit costs throughout. When several moves tie, the backtrace prefers
    substitution (or match) over deletion over insertion, so the reported
    breakdown is reproducible even though the distance alone would be.
    """
    hyp = list(hyp)
    ref = list(ref)
    r, h = len(ref), len(hyp)
    dist = [[0] * (h + 1) for _ in range(r + 1)]
    for i in range(1, r + 1):
        dist[i][0] = i
    for j in range(1, h + 1):
        dist[0][j] = j
    for i in range(1, r + 1):
        for j in range(1, h + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i][j] = min(
                dist[i - 1][j - 1] + (0 if same else 1),
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
            )
    subs = dels = ins = matches = 0
    i, j = r, h
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if dist[i][j] == dist[i - 1][j - 1] + (0 if same else 1):
                if same:
                    matches += 1
                else:
                    subs += 1
                i -= 1
                j -= 1
                continue
        if i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return EditCounts(
        distance=dist[r][h],
        substitutions=subs,
        deletions=dels,
        insertions=ins,
        matches=matches,
    )


def token_error_rate(hyp: Sequence, ref: Sequence) -> float:
    """(substitutions + deletions + insertions) / |ref|; may exceed 1."""
    ref = list(ref)
    if len(ref) == 0:
        raise InvalidInputError("reference must be non-empty")
    return edit_distance(hyp, ref).distance / len(ref)


def corpus_ter(
    system,
    corpus,
    split: str,
    cache=None,
    batch_size: int = 8,
    max_len: int = 12,
) -> float:
    """Corpus-level TER of the fused inference path on one split.

    Total edits over total reference length, so longer utterances weigh
    proportionally more than in a per-utterance average.
    """
    from . import training  # deferred: training imports this module

    from .asr import greedy_decode

    utts = corpus.split(split)
    if len(utts) == 0:
        raise InvalidInputError(f"corpus split {split!r} is empty")
    if cache is None:
        cache = training.FeatureCache(system.features)
    was_training = system.training
    system.eval()
    total_edits = 0
    total_ref = 0
    try:
        with torch.no_grad():
            for chunk in training.make_batches(utts, batch_size):
                batch = training.collate(chunk, cache, system.vocab)
                front = system.fused_path(batch.noisy_mags, batch.frame_mask)
                hyps = greedy_decode(
                    system.asr,
                    front["fused"],
                    system.vocab,
                    frame_mask=batch.frame_mask,
                    max_len=max_len,
                )
                for hyp, utt in zip(hyps, chunk):
                    total_edits += edit_distance(hyp, utt.tokens).distance
                    total_ref += len(utt.tokens)
    finally:
        if was_training:
            system.train()
    return total_edits / total_ref


def run_eval(checkpoint_path, corpus, split: str = "test", batch_size: Optional[int] = None):
    """Score a saved checkpoint on one corpus split."""
    from . import training

    system, config, meta = training.load_checkpoint(checkpoint_path)
    bs = batch_size or config.training.batch_size
    ter = corpus_ter(
        system, corpus, split,
        batch_size=bs, max_len=config.training.max_decode_len,
    )
    return {
        "split": split,
        "ter": ter,
        "n_utterances": len(corpus.split(split)),
        "checkpoint_step": meta.get("step"),
        "checkpoint_epoch": meta.get("epoch"),
    }


@dataclass(frozen=True)
class AblationVariant:
    """One training configuration under comparison."""

    name: str
    dual_path: bool = True
    use_sl: bool = True
    use_cl: bool = True
    layer_selection: Optional[str] = None


@dataclass(frozen=True)
class AblationSpec:
    """Named variants crossed with seeds over one shared base config.

    A single variant is accepted for degenerate sweeps even though a
    comparison table only becomes informative with two or more.
    """

    variants: tuple
    seeds: tuple

    def __post_init__(self):
        if len(self.variants) < 1:
            raise InvalidInputError("need at least one variant")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise InvalidInputError(f"variant names must be unique, got {names}")
        if len(self.seeds) < 1:
            raise InvalidInputError("need at least one seed")


def ablation_spec_from_dict(data: dict) -> AblationSpec:
    variants = tuple(
        AblationVariant(**{str(k): v for k, v in item.items()})
        for item in data.get("variants", [])
    )
    seeds = tuple(int(s) for s in data.get("seeds", []))
    return AblationSpec(variants=variants, seeds=seeds)


@dataclass
class AblationResult:
    rows: list
    summary: dict
    results_path: Path
    table_path: Path


def _variant_config(base: ExperimentConfig, variant: AblationVariant, seed: int) -> ExperimentConfig:
    overrides = dict(
        dual_path=variant.dual_path,
        use_sl=variant.use_sl,
        use_cl=variant.use_cl,
        seed=seed,
    )
    # None means the variant does not override the base selection.
    if variant.layer_selection is not None:
        overrides["layer_selection"] = variant.layer_selection
    return base.replace_training(**overrides)


def render_ablation_table(rows: list, summary: dict, variants: Sequence[AblationVariant]) -> str:
    """Fixed-width text table: one row per variant, seeds as columns."""
    seeds = sorted({row["seed"] for row in rows})
    header = (
        f"{'Variant':<24}{'DP':>4}{'SL':>4}{'CL':>4}{'Layers':>8}"
        + "".join(f"{'s' + str(s):>9}" for s in seeds)
        + f"{'mean':>9}{'std':>8}"
    )
    lines = [header, "-" * len(header)]
    by_variant = {v.name: {} for v in variants}
    for row in rows:
        by_variant[row["variant"]][row["seed"]] = row["test_ter"]
    for v in variants:
        cells = []
        for s in seeds:
            ter = by_variant[v.name].get(s)
            cells.append(f"{'failed':>9}" if ter is None else f"{ter:>9.4f}")
        stats = summary["variants"][v.name]
        mean = f"{stats['mean']:>9.4f}" if stats["mean"] is not None else f"{'-':>9}"
        std = f"{stats['std']:>8.4f}" if stats["std"] is not None else f"{'-':>8}"
        lines.append(
            f"{v.name:<24}"
            f"{'yes' if v.dual_path else 'no':>4}"
            f"{'yes' if v.use_sl else 'no':>4}"
            f"{'yes' if v.use_cl else 'no':>4}"
            f"{v.layer_selection if v.layer_selection is not None else 'base':>8}"
            + "".join(cells)
            + mean
            + std
        )
    return "\n".join(lines) + "\n"


def run_ablation(
    spec: AblationSpec,
    corpus,
    out_dir,
    base_config: Optional[ExperimentConfig] = None,
) -> AblationResult:
    """Train every (variant, seed) pair and tabulate test TER.

    A run that aborts with a divergence marks its cell failed and the sweep
    continues. Summary holds per-variant mean and standard deviation over
    the surviving seeds plus pairwise sign counts (in how many seeds the
    first variant beat the second).
    """
    from . import training

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = base_config or ExperimentConfig()
    rows = []
    for variant in spec.variants:
        for seed in spec.seeds:
            run_dir = out_dir / variant.name / f"seed-{seed}"
            config = _variant_config(base, variant, seed)
            try:
                result = training.run_training(config, corpus, run_dir)
                system, cfg, _ = training.load_checkpoint(result.checkpoint_path)
                ter = corpus_ter(
                    system, corpus, "test",
                    batch_size=cfg.training.batch_size,
                    max_len=cfg.training.max_decode_len,
                )
                rows.append({"variant": variant.name, "seed": seed, "test_ter": ter})
            except DivergenceError as err:
                rows.append(
                    {
                        "variant": variant.name,
                        "seed": seed,
                        "test_ter": None,
                        "error": str(err),
                    }
                )
    summary: dict = {"variants": {}, "sign_counts": {}}
    per_variant = {}
    for variant in spec.variants:
        ters = [
            row["test_ter"]
            for row in rows
            if row["variant"] == variant.name and row["test_ter"] is not None
        ]
        per_variant[variant.name] = {
            row["seed"]: row["test_ter"]
            for row in rows
            if row["variant"] == variant.name
        }
        if ters:
            mean = float(np.mean(ters))
            std = float(np.std(ters, ddof=1)) if len(ters) > 1 else 0.0
        else:
            mean = None
            std = None
        summary["variants"][variant.name] = {
            "mean": mean,
            "std": std,
            "n_ok": len(ters),
            "n_failed": len(spec.seeds) - len(ters),
        }
    for a in spec.variants:
        for b in spec.variants:
            if a.name == b.name:
                continue
            wins = 0
            comparable = 0
            for seed in spec.seeds:
                ta = per_variant[a.name].get(seed)
                tb = per_variant[b.name].get(seed)
                if ta is None or tb is None:
                    continue
                comparable += 1
                if ta < tb:
                    wins += 1
            summary["sign_counts"][f"{a.name} < {b.name}"] = {
                "wins": wins,
                "of": comparable,
            }
    results_path = out_dir / "results.jsonl"
    with open(results_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    table = render_ablation_table(rows, summary, spec.variants)
    table_path = out_dir / "table.txt"
    table_path.write_text(table, encoding="utf-8")
    return AblationResult(rows, summary, results_path, table_path)


@dataclass
class EmbeddingDump:
    """Labeled per-utterance arrays from both recognizer branches."""

    uid: str
    arrays: dict
    meta: dict
    path: Optional[Path] = None


def dump_embeddings(
    checkpoint_path,
    corpus,
    uid: str,
    layers="all",
    out_path=None,
) -> EmbeddingDump:
    """Capture encoder and decoder embeddings for one utterance.

    For every selected encoder layer the dump holds one clean-branch and
    one fused-branch array (frames x width); the decoder contributes the
    final hidden states of each branch under teacher forcing with the
    reference tokens. Arrays are float32, so a dump re-read from disk is
    bit-identical to the one returned.
    """
    from . import training
    from .config import parse_layer_selection

    system, config, meta = training.load_checkpoint(checkpoint_path)
    utt = corpus.utterance(uid)
    sel = parse_layer_selection(layers, config.asr.enc_layers)
    cache = training.FeatureCache(system.features)
    batch = training.collate([utt], cache, system.vocab)
    arrays = {}
    with torch.no_grad():
        front = system.fused_path(batch.noisy_mags, batch.frame_mask)
        states_f = system.asr.encode(front["fused"], batch.frame_mask)
        feats_c = system.clean_features(batch.clean_mags, batch.frame_mask)
        states_c = system.asr.encode(feats_c, batch.frame_mask)
        t = int(states_f.lengths[0])
        for layer in sel:
            e_c = states_c.layers[layer - 1][0, :t]
            e_f = states_f.layers[layer - 1][0, :t]
            arrays[f"encoder/clean/layer{layer}"] = e_c.numpy().astype("<f4")
            arrays[f"encoder/fused/layer{layer}"] = e_f.numpy().astype("<f4")
        _, hidden_c = system.asr.decode(states_c, batch.targets_in, return_hidden=True)
        _, hidden_f = system.asr.decode(states_f, batch.targets_in, return_hidden=True)
        dec_c = system.asr.decoder_norm(hidden_c[-1])[0]
        dec_f = system.asr.decoder_norm(hidden_f[-1])[0]
        arrays["decoder/clean"] = dec_c.numpy().astype("<f4")
        arrays["decoder/fused"] = dec_f.numpy().astype("<f4")
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise DivergenceError(
                f"embedding array {name} is non-finite", step=meta.get("step"),
                components={},
            )
    dump_meta = {
        "kind": "embedding dump",
        "utterance": uid,
        "layers": list(sel),
        "checkpoint_step": meta.get("step"),
        "checkpoint_epoch": meta.get("epoch"),
        "tokens": [int(t) for t in utt.tokens],
    }
    dump = EmbeddingDump(uid=uid, arrays=arrays, meta=dump_meta)
    if out_path is not None:
        write_container(out_path, MAGIC_EMBEDDINGS, dump_meta, arrays)
        dump.path = Path(out_path)
    return dump


def load_embedding_dump(path) -> EmbeddingDump:
    meta, arrays = read_container(path, expected_magic=MAGIC_EMBEDDINGS)
    return EmbeddingDump(
        uid=meta.get("utterance", ""), arrays=arrays, meta=meta, path=Path(path)
    )


def style_gap(dump: EmbeddingDump, layer: int) -> float:
    """Frobenius distance between the branch style matrices at one layer.

    Measures how far apart the clean and fused channel correlations sit
    for the dumped utterance; smaller means the branches express the
    utterance with more similar feature co-activation.
    """
    try:
        e_c = np.asarray(dump.arrays[f"encoder/clean/layer{layer}"], dtype=np.float64)
        e_f = np.asarray(dump.arrays[f"encoder/fused/layer{layer}"], dtype=np.float64)
    except KeyError as err:
        raise InvalidInputError(f"dump has no encoder arrays for layer {layer}") from err
    s_c = e_c.T @ e_c
    s_f = e_f.T @ e_f
    return float(np.linalg.norm(s_c - s_f))
