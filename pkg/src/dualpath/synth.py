"""Deterministic synthetic corpus of parallel clean/noisy utterances.

Every content token owns a fixed pair of sinusoid frequencies snapped to
STFT bin centers, so transcripts stay recoverable at desk scale. Clean
waves are concatenated token signatures; noisy waves add white Gaussian
noise scaled to realize a requested SNR exactly. All generation is a pure
function of (config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import CorpusConfig
from .errors import InvalidInputError

LOG_EPS = 1e-10  # floor inside the fbank log so all-zero frames stay finite

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory: content ids 0..n_content-1, then start/end/pad."""

    n_content: int = 16

    @property
    def start_id(self) -> int:
        return self.n_content

    @property
    def end_id(self) -> int:
        return self.n_content + 1

    @property
    def pad_id(self) -> int:
        return self.n_content + 2

    @property
    def size(self) -> int:
        return self.n_content + 3


@dataclass
class Utterance:
    """One corpus item: transcript plus equal-length clean and noisy waves."""

    uid: str
    tokens: np.ndarray  # int64 content ids
    clean_wave: np.ndarray  # float32
    noisy_wave: np.ndarray  # float32, same length
    snr_db: float


@dataclass
class Spectrogram:
    """Non-negative T x K STFT magnitudes with their framing parameters."""

    mags: np.ndarray
    frame: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.mags.shape[0]

    @property
    def n_bins(self) -> int:
        return self.mags.shape[1]


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    splits: dict[str, list[Utterance]]

    def split(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise InvalidInputError(f"unknown split {name!r}")
        return self.splits[name]

    def utterance(self, uid: str) -> Utterance:
        for utts in self.splits.values():
            for u in utts:
                if u.uid == uid:
                    return u
        raise InvalidInputError(f"unknown utterance id {uid!r}")


def token_frequencies(token: int, config: CorpusConfig) -> tuple[float, float]:
    """Fixed (low, high) sinusoid pair for one content token, on bin centers.

    Low band covers 10%..70% of Nyquist, high band 50%..110% shifted to stay
    below Nyquist; both snap to the nearest STFT bin so tones land in single
    bins. The two arithmetic progressions never collide for <= 16 tokens at
    the default frame size.
    """
    if not 0 <= token < config.n_content_tokens:
        raise InvalidInputError(f"content token {token} outside [0, {config.n_content_tokens})")
    nyquist = config.sample_rate / 2.0
    bin_hz = config.sample_rate / config.frame
    f_low = nyquist * (0.10 + 0.03 * token)
    f_high = nyquist * (0.50 + 0.03 * token)
    k_low = max(1, round(f_low / bin_hz))
    k_high = min(config.frame // 2 - 1, round(f_high / bin_hz))
    return k_low * bin_hz, k_high * bin_hz


def _token_signature(token: int, config: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(round(config.token_duration_s * config.sample_rate))
    f1, f2 = token_frequencies(token, config)
    t = np.arange(n, dtype=np.float64) / config.sample_rate
    ph1, ph2 = rng.uniform(0.0, 2.0 * math.pi, size=2)
    sig = 0.5 * (np.sin(2 * math.pi * f1 * t + ph1) + np.sin(2 * math.pi * f2 * t + ph2))
    ramp = min(40, n // 8)
    if ramp > 0:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp, endpoint=False)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        sig *= env
    return sig


def synth_utterance(
    tokens,
    snr_db: float,
    seed: int,
    config: CorpusConfig | None = None,
    uid: str | None = None,
) -> Utterance:
    """Generate one (clean, noisy) pair for a token sequence at a target SNR.

    Deterministic given (tokens, snr_db, seed, config). The noise is scaled
    so the realized clean/noise power ratio equals snr_db up to float
    rounding.
    """
    config = config or CorpusConfig()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InvalidInputError("tokens must be a non-empty 1-D sequence")
    if not math.isfinite(snr_db):
        raise InvalidInputError(f"snr_db must be finite, got {snr_db}")
    for t in tokens.tolist():
        if not 0 <= t < config.n_content_tokens:
            raise InvalidInputError(f"token id {t} outside [0, {config.n_content_tokens})")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    clean = np.concatenate([_token_signature(t, config, rng) for t in tokens.tolist()])
    noise = rng.standard_normal(clean.size)
    clean_power = float(np.mean(clean**2))
    noise_power = float(np.mean(noise**2))
    scale = math.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    noisy = clean + scale * noise

    return Utterance(
        uid=uid if uid is not None else f"utt-{seed:d}",
        tokens=tokens,
        clean_wave=clean.astype(np.float32),
        noisy_wave=noisy.astype(np.float32),
        snr_db=float(snr_db),
    )


def stft_magnitude(wave, frame: int = 200, hop: int = 80) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window and no padding.

    T = 1 + floor((len - frame) / hop), K = frame // 2 + 1.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise InvalidInputError("wave must be 1-D")
    if wave.size < frame:
        raise InvalidInputError(f"wave of {wave.size} samples is shorter than one frame ({frame})")
    n_frames = 1 + (wave.size - frame) // hop
    window = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(frame) / frame)
    frames = np.stack([wave[i * hop : i * hop + frame] for i in range(n_frames)])
    mags = np.abs(np.fft.rfft(frames * window, axis=1))
    return Spectrogram(mags=mags, frame=frame, hop=hop)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_bins), spanning 0..Nyquist."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    # fractional bin positions of the triangle corners
    pos = hz_points * (n_bins - 1) / nyquist
    k = np.arange(n_bins, dtype=np.float64)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = pos[m], pos[m + 1], pos[m + 2]
        up = (k - lo) / max(center - lo, 1e-12)
        down = (hi - k) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel_fbank(
    spec: Spectrogram,
    n_mels: int,
    sample_rate: int = 8000,
    filters: np.ndarray | None = None,
) -> np.ndarray:
    """Log-mel filterbank features, shape (T, n_mels).

    values = log(filters @ mags^2 + eps) with eps = 1e-10. A caller-supplied
    filter matrix overrides the mel bank (used by degenerate-filter tests).
    """
    if n_mels < 1 or n_mels > spec.n_bins:
        raise InvalidInputError(f"n_mels must be in [1, {spec.n_bins}], got {n_mels}")
    if filters is None:
        filters = mel_filterbank(n_mels, spec.n_bins, sample_rate)
    if filters.shape != (n_mels, spec.n_bins):
        raise InvalidInputError(
            f"filter matrix shape {filters.shape} != ({n_mels}, {spec.n_bins})"
        )
    power = np.asarray(spec.mags, dtype=np.float64) ** 2
    return np.log(power @ filters.T + LOG_EPS)


def token_histogram(utterances: list[Utterance], n_content: int) -> list[int]:
    counts = np.zeros(n_content, dtype=np.int64)
    for u in utterances:
        counts += np.bincount(u.tokens, minlength=n_content)
    return counts.tolist()


def make_corpus(config: CorpusConfig) -> Corpus:
    """Generate disjoint train/valid/test splits, deterministically.

    Each utterance derives its own seed from (master seed, global index), so
    per-utterance generation is order-independent.
    """
    for name, count in (("train", config.train), ("valid", config.valid), ("test", config.test)):
        if count <= 0:
            raise InvalidInputError(f"{name} count must be > 0, got {count}")
    if config.min_tokens < 1 or config.max_tokens < config.min_tokens:
        raise InvalidInputError(
            f"bad utterance-length range [{config.min_tokens}, {config.max_tokens}]"
        )
    if not (math.isfinite(config.snr_db_min) and math.isfinite(config.snr_db_max)):
        raise InvalidInputError("SNR range must be finite")

    vocab = Vocabulary(config.n_content_tokens)
    splits: dict[str, list[Utterance]] = {}
    counts = {"train": config.train, "valid": config.valid, "test": config.test}
    global_idx = 0
    for split in SPLITS:
        utts = []
        for i in range(counts[split]):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((config.seed, global_idx)))
            )
            n_tok = int(rng.integers(config.min_tokens, config.max_tokens + 1))
            tokens = rng.integers(0, config.n_content_tokens, size=n_tok)
            snr = float(rng.uniform(config.snr_db_min, config.snr_db_max))
            synth_seed = int(rng.integers(0, 2**31 - 1))
            utts.append(
                synth_utterance(tokens, snr, synth_seed, config, uid=f"{split}-{i:05d}")
            )
            global_idx += 1
        splits[split] = utts
    return Corpus(config=config, vocab=vocab, splits=splits)


def corpus_stats(corpus: Corpus) -> dict:
    """Per-split sizes and token distributions."""
    stats = {}
    for split, utts in corpus.splits.items():
        stats[split] = {
            "n_utterances": len(utts),
            "n_tokens": int(sum(u.tokens.size for u in utts)),
            "token_histogram": token_histogram(utts, corpus.config.n_content_tokens),
            "snr_db_range": [
                min(u.snr_db for u in utts),
                max(u.snr_db for u in utts),
            ],
        }
    return stats
