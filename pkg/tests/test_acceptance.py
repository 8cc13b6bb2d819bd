"""Acceptance gate: eleven checks, one printed verdict line each.

Checks 1 through 7 and 10 through 11 are exact or tolerance-based contracts;
checks 8 and 9 are directional replications over five seeds and share one
session-scoped ablation sweep, so this module trains twenty desk-scale
models and takes about an hour on one core.
"""
import functools
import math

import numpy as np
import pytest
import torch

from dualpath.asr import greedy_decode
from dualpath.config import (
    AsrConfig,
    CorpusConfig,
    ExperimentConfig,
    LossWeights,
    TrainingConfig,
)
from dualpath.enhance import MaskEstimator, apply_mask, enhancement_loss, estimate_mask
from dualpath.evaluation import (
    AblationSpec,
    AblationVariant,
    dump_embeddings,
    edit_distance,
    run_ablation,
    style_gap,
)
from dualpath.fusion import FusionNet, fuse
from dualpath.style import consistency_loss, style_loss, style_matrix
from dualpath.synth import make_corpus
from dualpath.training import (
    FeatureCache,
    build_system,
    collate,
    learning_rate,
    load_checkpoint,
    run_training,
    total_loss,
)

torch.set_num_threads(1)


def verdict(number: int, ok: bool, detail: str) -> None:
    print(f"acceptance {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"acceptance {number} failed: {detail}"


# --- shared directional sweep (checks 7, 8, 9) -----------------------------

VARIANT_FUSED = "fused-only"
VARIANT_DUAL = "dual-path"
VARIANT_SL = "dual-path-sl"
VARIANT_FULL = "dual-path-sl-cl"
SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def directional_sweep(tmp_path_factory):
    corpus = make_corpus(CorpusConfig())
    spec = AblationSpec(
        variants=(
            AblationVariant(
                name=VARIANT_FUSED, dual_path=False, use_sl=False, use_cl=False
            ),
            AblationVariant(
                name=VARIANT_DUAL, dual_path=True, use_sl=False, use_cl=False
            ),
            AblationVariant(
                name=VARIANT_SL, dual_path=True, use_sl=True, use_cl=False
            ),
            AblationVariant(
                name=VARIANT_FULL, dual_path=True, use_sl=True, use_cl=True
            ),
        ),
        seeds=SEEDS,
    )
    out = tmp_path_factory.mktemp("directional")
    result = run_ablation(spec, corpus, out, base_config=ExperimentConfig())
    return corpus, result, out


def test_01_desk_scale_substitutes_directional_checks():
    """Full-scale benchmark accuracy is out of reach here by design."""
    system = build_system(ExperimentConfig(), seed=0)
    n_params = sum(p.numel() for p in system.parameters())
    corpus_cfg = CorpusConfig()
    n_utts = corpus_cfg.train + corpus_cfg.valid + corpus_cfg.test
    ok = n_params < 5_000_000 and n_utts < 1_000
    verdict(
        1,
        ok,
        f"desk system ({n_params} parameters, {n_utts} synthetic utterances) "
        "cannot reproduce published benchmark error rates; "
        "directional and property checks below substitute",
    )


# --- check 2: style matrix and style loss against loop oracles -------------

def gram_oracle(e: np.ndarray) -> np.ndarray:
    t, d = e.shape
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            for k in range(t):
                out[i, j] += e[k, i] * e[k, j]
    return out


def style_loss_oracle(clean, fused, sel):
    d = clean[0].shape[1]
    total = 0.0
    for idx in sel:
        diff = gram_oracle(clean[idx - 1]) - gram_oracle(fused[idx - 1])
        for i in range(d):
            for j in range(d):
                total += diff[i, j] ** 2
    return total / (len(sel) * d * d)


def test_02_style_matrix_and_loss_match_loop_oracles():
    hand = style_matrix(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
    exact = torch.equal(hand, torch.tensor([[10.0, 14.0], [14.0, 20.0]]))
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        n_layers = int(rng.integers(1, 5))
        clean = [rng.standard_normal((t, d)) for _ in range(n_layers)]
        fused = [rng.standard_normal((t, d)) for _ in range(n_layers)]
        n_sel = int(rng.integers(1, n_layers + 1))
        sel = sorted(rng.choice(n_layers, size=n_sel, replace=False) + 1)
        got_m = style_matrix(torch.tensor(clean[0])).numpy()
        rel_m = np.abs(got_m - gram_oracle(clean[0])).max() / max(
            1e-12, np.abs(got_m).max()
        )
        got = float(
            style_loss(
                [torch.tensor(c) for c in clean],
                [torch.tensor(f) for f in fused],
                sel=[int(s) for s in sel],
                stop_clean_gradient=False,
            )
        )
        want = style_loss_oracle(clean, fused, [int(s) for s in sel])
        rel = abs(got - want) / max(abs(want), 1e-12)
        worst = max(worst, rel, rel_m)
    ok = exact and worst < 1e-6
    verdict(2, ok, f"hand case exact={exact}, worst relative error {worst:.2e}")


# --- check 3: consistency-loss properties -----------------------------------

def test_03_consistency_loss_properties():
    rng = np.random.default_rng(7)
    sym_worst = 0.0
    all_nonneg = True
    zero_prop = True
    for _ in range(100):
        u = int(rng.integers(1, 9))
        v = int(rng.integers(2, 12))
        a = torch.tensor(rng.standard_normal((u, v)))
        b = torch.tensor(rng.standard_normal((u, v)))
        ab = float(consistency_loss(a, b, stop_clean_gradient=False))
        ba = float(consistency_loss(b, a, stop_clean_gradient=False))
        all_nonneg = all_nonneg and ab >= 0.0
        sym_worst = max(sym_worst, abs(ab - ba))
        same = float(consistency_loss(a, a.clone(), stop_clean_gradient=False))
        shifted = float(consistency_loss(a, a + 3.7, stop_clean_gradient=False))
        differs = float(consistency_loss(a, b, stop_clean_gradient=False))
        zero_prop = zero_prop and same < 1e-12 and shifted < 1e-9 and (
            differs > 1e-9 or torch.allclose(torch.softmax(a, -1), torch.softmax(b, -1))
        )
    two_point = float(
        consistency_loss(
            torch.tensor([[0.0, 0.0]]),
            torch.tensor([[math.log(9.0), 0.0]]),
        )
    )
    value_ok = abs(two_point - 0.8789) < 1e-3
    ok = all_nonneg and sym_worst < 1e-9 and zero_prop and value_ok
    verdict(
        3,
        ok,
        f"nonneg={all_nonneg}, symmetry worst {sym_worst:.1e}, "
        f"zero-iff-equal={zero_prop}, two-point value {two_point:.4f}",
    )


# --- check 4: finite-difference gradient agreement ---------------------------

def fd_check(loss_fn, leaves, n_picks, rng, h_scale=1e-6):
    """Max relative gap between analytic and central-difference gradients."""
    for leaf in leaves:
        leaf.requires_grad_(True)
        if leaf.grad is not None:
            leaf.grad = None
    loss_fn().backward()
    flat = [
        (li, i) for li, leaf in enumerate(leaves) for i in range(leaf.numel())
    ]
    picks = rng.choice(len(flat), size=min(n_picks, len(flat)), replace=False)
    worst = 0.0
    for k in picks:
        li, i = flat[int(k)]
        leaf = leaves[li]
        analytic = float(leaf.grad.reshape(-1)[i])
        base = float(leaf.data.reshape(-1)[i])
        h = h_scale * max(1.0, abs(base))
        with torch.no_grad():
            leaf.data.reshape(-1)[i] = base + h
            up = float(loss_fn().detach())
            leaf.data.reshape(-1)[i] = base - h
            down = float(loss_fn().detach())
            leaf.data.reshape(-1)[i] = base
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def test_04_gradients_match_central_differences():
    rng = np.random.default_rng(3)
    results = {}

    clean = [torch.tensor(rng.standard_normal((5, 4))) for _ in range(2)]
    fused = [torch.tensor(rng.standard_normal((5, 4))) for _ in range(2)]
    results["style_loss"] = fd_check(
        lambda: style_loss(clean, fused, stop_clean_gradient=False),
        clean + fused, 24, rng,
    )

    d_c = torch.tensor(rng.standard_normal((4, 6)))
    d_f = torch.tensor(rng.standard_normal((4, 6)))
    results["consistency_loss"] = fd_check(
        lambda: consistency_loss(d_c, d_f, stop_clean_gradient=False),
        [d_c, d_f], 24, rng,
    )

    scores = torch.tensor(rng.standard_normal((2, 3, 19)))
    targets = torch.tensor([[4, 9, 17], [2, 17, 18]])
    results["asr_loss"] = fd_check(
        lambda: recognition_loss_for_check(scores, targets), [scores], 24, rng
    )

    enhanced = torch.tensor(np.abs(rng.standard_normal((6, 9))))
    clean_m = torch.tensor(np.abs(rng.standard_normal((6, 9))))
    results["enhancement_loss"] = fd_check(
        lambda: enhancement_loss(enhanced, clean_m), [enhanced], 24, rng
    )

    torch.manual_seed(0)
    net = FusionNet(blocks=1, channels=4).double()
    x_e = torch.tensor(rng.standard_normal((6, 10)))
    x_n = torch.tensor(rng.standard_normal((6, 10)))
    w = torch.tensor(rng.standard_normal((6, 10)))
    params = list(net.parameters())
    results["fuse"] = fd_check(
        lambda: (fuse(x_e, x_n, net) * w).sum(), params, 24, rng
    )

    worst = max(results.values())
    ok = worst < 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
    verdict(4, ok, f"worst relative gradient gaps: {detail}")


def recognition_loss_for_check(scores, targets):
    from dualpath.asr import recognition_loss

    return recognition_loss(scores, targets, pad_id=99)


# --- check 5: objective composition exactness -------------------------------

def test_05_objective_composition_exact():
    from fractions import Fraction

    paper = LossWeights(lambda_asr=0.7, lambda_sl=0.01, lambda_cl=0.4, lambda_fused=0.3)
    worked = float(total_loss(1.0, 2.0, 4.0, 10.0, 0.5, paper))
    worked_ok = abs(worked - 2.42) < 1e-12
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        e, c, f, s, cl = rng.uniform(0.0, 4.0, size=5)
        la, lf = rng.uniform(0.0, 1.0, size=2)
        ls, lc = rng.uniform(0.0, 1.0, size=2)
        w = LossWeights(lambda_asr=la, lambda_sl=ls, lambda_cl=lc, lambda_fused=lf)
        got = float(total_loss(e, c, f, s, cl, w))
        want = float(
            Fraction(e)
            - Fraction(la) * Fraction(e)
            + Fraction(la) * Fraction(c)
            - Fraction(la) * Fraction(lf) * Fraction(c)
            + Fraction(la) * Fraction(lf) * Fraction(f)
            + Fraction(ls) * Fraction(s)
            + Fraction(lc) * Fraction(cl)
        )
        worst = max(worst, abs(got - want))
    ok = worked_ok and worst < 1e-12
    verdict(5, ok, f"worked example {worked:.6f}, worst expansion gap {worst:.1e}")


# --- check 6: schedule reference points --------------------------------------

def test_06_schedule_reference_points():
    gaps = [
        abs(learning_rate(25000, 0.002, 25000) - 0.002),
        abs(learning_rate(12500, 0.002, 25000) - 0.001),
        abs(learning_rate(100000, 0.002, 25000) - 0.001),
    ]
    ok = max(gaps) < 1e-12
    verdict(6, ok, f"schedule gaps at the three reference steps: {max(gaps):.1e}")


# --- check 7: inference ignores the clean input ------------------------------

def test_07_inference_independent_of_clean_input(directional_sweep):
    import dataclasses

    corpus, _, out = directional_sweep
    ckpt = out / VARIANT_FULL / "seed-0" / "checkpoint.bin"
    system, config, _ = load_checkpoint(ckpt)
    utts = corpus.split("test")[:8]

    def decode_with(clean_substitute):
        subbed = [
            dataclasses.replace(u, clean_wave=clean_substitute(u)) for u in utts
        ]
        batch = collate(subbed, FeatureCache(system.features), system.vocab)
        with torch.no_grad():
            front = system.fused_path(batch.noisy_mags, batch.frame_mask)
            return greedy_decode(
                system.asr, front["fused"], system.vocab,
                frame_mask=batch.frame_mask,
                max_len=config.training.max_decode_len,
            )

    rng = np.random.default_rng(123)
    baseline = decode_with(lambda u: u.clean_wave)
    substitutes = [
        lambda u: rng.standard_normal(u.clean_wave.shape).astype(np.float32),
        lambda u: np.zeros_like(u.clean_wave),
        lambda u: u.noisy_wave,
    ]
    ok = all(decode_with(sub) == baseline for sub in substitutes)
    verdict(
        7,
        ok,
        "greedy decoding bit-identical when the clean-path input is replaced "
        "by noise, silence, or the noisy wave itself",
    )


# --- checks 8 and 9: directional replications over five seeds ----------------

def test_08_variant_ordering_over_seeds(directional_sweep):
    _, result, _ = directional_sweep
    means = {
        name: result.summary["variants"][name]["mean"]
        for name in (VARIANT_FUSED, VARIANT_DUAL, VARIANT_FULL)
    }
    per_seed = {
        (row["variant"], row["seed"]): row["test_ter"] for row in result.rows
    }
    full_order = sum(
        per_seed[(VARIANT_FULL, s)] < per_seed[(VARIANT_DUAL, s)] < per_seed[(VARIANT_FUSED, s)]
        for s in SEEDS
    )
    endpoint = sum(
        per_seed[(VARIANT_FULL, s)] < per_seed[(VARIANT_FUSED, s)] for s in SEEDS
    )
    mean_ok = means[VARIANT_FULL] < means[VARIANT_DUAL] < means[VARIANT_FUSED]
    ok = mean_ok and full_order >= 3 and endpoint >= 4
    verdict(
        8,
        ok,
        f"mean test TER {VARIANT_FULL}={means[VARIANT_FULL]:.4f} < "
        f"{VARIANT_DUAL}={means[VARIANT_DUAL]:.4f} < "
        f"{VARIANT_FUSED}={means[VARIANT_FUSED]:.4f}: {mean_ok}; "
        f"full ordering in {full_order}/5 seeds, endpoint in {endpoint}/5",
    )


def test_09_style_training_shrinks_branch_gap(directional_sweep):
    """The two regularizers are applied separately here, so the variant with
    style training alone isolates its effect on the branch Gram gap."""
    corpus, _, out = directional_sweep
    uid = corpus.split("test")[0].uid
    last_layer = ExperimentConfig().asr.enc_layers
    wins = 0
    gaps = []
    for seed in SEEDS:
        with_sl = style_gap(
            dump_embeddings(
                out / VARIANT_SL / f"seed-{seed}" / "checkpoint.bin", corpus, uid
            ),
            last_layer,
        )
        without_sl = style_gap(
            dump_embeddings(
                out / VARIANT_DUAL / f"seed-{seed}" / "checkpoint.bin", corpus, uid
            ),
            last_layer,
        )
        gaps.append((with_sl, without_sl))
        wins += with_sl < without_sl
    ok = wins >= 4
    detail = ", ".join(f"s{s}: {a:.3g} vs {b:.3g}" for s, (a, b) in zip(SEEDS, gaps))
    verdict(9, ok, f"style gap smaller with style training in {wins}/5 seeds ({detail})")


# --- check 10: edit-distance oracle -------------------------------------------

def test_10_edit_distance_matches_oracle():
    def oracle(hyp, ref):
        @functools.lru_cache(maxsize=None)
        def go(i, j):
            if i == 0:
                return j
            if j == 0:
                return i
            same = hyp[i - 1] == ref[j - 1]
            return min(
                go(i - 1, j - 1) + (0 if same else 1),
                go(i, j - 1) + 1,
                go(i - 1, j) + 1,
            )

        return go(len(hyp), len(ref))

    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        hyp = tuple(rng.integers(0, 6, size=rng.integers(0, 9)))
        ref = tuple(rng.integers(0, 6, size=rng.integers(1, 9)))
        if edit_distance(list(hyp), list(ref)).distance != oracle(hyp, ref):
            mismatches += 1
    ok = mismatches == 0
    verdict(10, ok, f"{mismatches} mismatches against the DP oracle on 1000 pairs")


# --- check 11: byte-level reproducibility -------------------------------------

def test_11_reproducible_artifacts(tmp_path):
    cfg = ExperimentConfig(
        corpus=CorpusConfig(train=12, valid=6, test=6, min_tokens=3, max_tokens=5),
        training=TrainingConfig(epochs=2, batch_size=6, warmup_steps=4, seed=3),
    )
    corpus = make_corpus(cfg.corpus)
    r1 = run_training(cfg, corpus, tmp_path / "a")
    r2 = run_training(cfg, corpus, tmp_path / "b")
    metrics_same = r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()
    ckpt_same = r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
    ok = metrics_same and ckpt_same
    verdict(
        11,
        ok,
        f"metrics byte-identical={metrics_same}, checkpoint byte-identical={ckpt_same}",
    )
