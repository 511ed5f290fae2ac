"""Acoustic front end: 80-dim log-mel filterbanks, mean norm, SpecAugment.

STFT uses a 25 ms periodic Hann window, 10 ms hop and a 512-point spectrum
at 16 kHz; 80 triangular mel filters span 0-8000 Hz.  These are standard
front-end conventions, fixed here so every derived frame count is
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE

N_MELS = 80
WIN_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FFT = 512
LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, 80)
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FeatureError(f"feature matrix must be (T, {N_MELS}), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise FeatureError("feature matrix contains non-finite entries")

    @property
    def num_frames(self):
        return self.frames.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, fmin=0.0, fmax=SAMPLE_RATE / 2):
    """(n_mels, n_fft//2 + 1) triangular filters on the mel scale."""
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / SAMPLE_RATE)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bins - lo) / max(center - lo, 1e-9)
        down = (hi - bins) / max(hi - center, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels=N_MELS, fmin=0.0, fmax=SAMPLE_RATE / 2):
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


_FILTERBANK = None
_WINDOW = None


def log_mel(clip):
    """T x 80 log-mel features; T = 1 + floor((N - 400) / 160)."""
    global _FILTERBANK, _WINDOW
    if clip.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz input, got {clip.sample_rate} Hz")
    x = clip.samples
    if len(x) < WIN_SAMPLES:
        raise FeatureError(f"clip of {len(x)} samples is shorter than one {WIN_SAMPLES}-sample window")
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
        n = np.arange(WIN_SAMPLES)
        _WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_SAMPLES)
    T = 1 + (len(x) - WIN_SAMPLES) // HOP_SAMPLES
    starts = np.arange(T) * HOP_SAMPLES
    frames = x[starts[:, None] + np.arange(WIN_SAMPLES)] * _WINDOW
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spec @ _FILTERBANK.T
    return FeatureMatrix(np.log(np.maximum(mel, LOG_FLOOR)))


@dataclass
class NormStats:
    mean: np.ndarray  # (80,) per-dimension mean over the training corpus

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.mean.shape != (N_MELS,):
            raise FeatureError(f"norm stats must have {N_MELS} dimensions, got {self.mean.shape}")


def compute_norm_stats(feature_matrices):
    """Per-dimension mean over all frames of the (training) corpus."""
    total = np.zeros(N_MELS)
    count = 0
    for fm in feature_matrices:
        total += fm.frames.sum(axis=0)
        count += fm.num_frames
    if count == 0:
        raise FeatureError("cannot compute norm stats from an empty corpus")
    return NormStats(total / count)


def global_mean_norm(features, stats):
    return FeatureMatrix(features.frames - stats.mean, features.frame_shift_ms, features.frame_length_ms)


@dataclass
class SpecAugmentPolicy:
    num_time_masks: int = 2
    max_time_width: int = 40
    num_freq_masks: int = 2
    max_freq_width: int = 27


def spec_augment(features, policy, rng):
    """Zero out random time/frequency bands (training only, post-norm).

    Mask widths are drawn uniformly from [0, max_width]; the fill value 0 is
    the post-normalization mean, so masking injects no energy bias.
    """
    out = features.frames.copy()
    T, D = out.shape
    for _ in range(policy.num_time_masks):
        w = int(rng.integers(0, min(policy.max_time_width, T) + 1))
        if w:
            start = int(rng.integers(0, T - w + 1))
            out[start : start + w, :] = 0.0
    for _ in range(policy.num_freq_masks):
        w = int(rng.integers(0, min(policy.max_freq_width, D) + 1))
        if w:
            start = int(rng.integers(0, D - w + 1))
            out[:, start : start + w] = 0.0
    return FeatureMatrix(out, features.frame_shift_ms, features.frame_length_ms)
