"""Synthetic micro-corpus generator for desk-scale experiments.

A ten-word audio vocabulary (distinct dual-tone bursts) is composed into
short utterances; transcripts use one letter per word, space separated.
Two synthetic noise types are generated as long wav files so the usual
train/test noise partitioning applies.
"""

from __future__ import annotations

import os
import string

import numpy as np

from .audio import AudioClip, ManifestEntry, write_manifest, write_wav

WORD_SECONDS = 0.12
GAP_SECONDS = 0.06
EDGE_SECONDS = 0.05
SR = 16000

WORD_LETTERS = string.ascii_lowercase[:10]


def _word_waveform(k, rng):
    """Dual-tone burst for word k with a raised-cosine envelope."""
    n = int(WORD_SECONDS * SR)
    t = np.arange(n) / SR
    f1 = 350.0 + 130.0 * k
    f2 = 1500.0 + 230.0 * k
    phase1, phase2 = rng.uniform(0, 2 * np.pi, size=2)
    env = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    amp = rng.uniform(0.16, 0.2)
    return amp * env * (np.sin(2 * np.pi * f1 * t + phase1) + 0.8 * np.sin(2 * np.pi * f2 * t + phase2))


def synth_utterance(word_ids, rng):
    edge = np.zeros(int(EDGE_SECONDS * SR))
    gap = np.zeros(int(GAP_SECONDS * SR))
    parts = [edge]
    for i, k in enumerate(word_ids):
        if i:
            parts.append(gap)
        parts.append(_word_waveform(k, rng))
    parts.append(edge)
    return AudioClip(np.concatenate(parts))


def _noise_static(n, rng):
    """Broadband noise, lightly low-passed."""
    white = rng.standard_normal(n + 8)
    kernel = np.ones(8) / 8.0
    return 0.3 * np.convolve(white, kernel, mode="valid")[:n]


def _noise_babble(n, rng):
    """Competing-speaker babble: overlapping word-like dual-tone bursts."""
    out = np.zeros(n)
    wlen = int(WORD_SECONDS * SR)
    for _ in range(3):
        pos = int(rng.uniform(0, GAP_SECONDS) * SR)
        while pos < n:
            burst = _word_waveform(int(rng.integers(10)), rng)
            end = min(n, pos + wlen)
            out[pos:end] += burst[: end - pos]
            pos += wlen + int(rng.uniform(0.0, 0.08) * SR)
    return out


def make_toy_corpus(
    root,
    n_train=60,
    n_test=20,
    seed=0,
    min_words=3,
    max_words=8,
    noise_seconds=30.0,
):
    """Write clean train/test manifests plus a partitionable noise pool.

    Returns a dict of paths: clean_train, clean_test, noise_dir, audio_dir.
    """
    rng = np.random.default_rng([int(seed), 0x746F79])
    audio_dir = os.path.join(root, "audio")
    noise_dir = os.path.join(root, "noise")
    os.makedirs(audio_dir, exist_ok=True)
    for ntype in ("static", "babble"):
        os.makedirs(os.path.join(noise_dir, ntype), exist_ok=True)

    def write_split(name, count):
        entries = []
        for i in range(count):
            n_words = int(rng.integers(min_words, max_words + 1))
            word_ids = [int(rng.integers(10)) for _ in range(n_words)]
            clip = synth_utterance(word_ids, rng)
            uid = f"{name}{i:04d}"
            path = os.path.join(audio_dir, f"{uid}.wav")
            write_wav(path, clip)
            transcript = " ".join(WORD_LETTERS[k] for k in word_ids)
            entries.append(ManifestEntry(uid, path, transcript))
        manifest = os.path.join(root, f"clean_{name}.jsonl")
        write_manifest(manifest, entries)
        return manifest

    clean_train = write_split("train", n_train)
    clean_test = write_split("test", n_test)

    n = int(noise_seconds * SR)
    for ntype, synth in (("static", _noise_static), ("babble", _noise_babble)):
        samples = synth(n, rng)
        peak = np.abs(samples).max()
        if peak > 0.99:
            samples = samples * (0.99 / peak)
        write_wav(os.path.join(noise_dir, ntype, f"{ntype}.wav"), AudioClip(samples))

    return {
        "clean_train": clean_train,
        "clean_test": clean_test,
        "noise_dir": noise_dir,
        "audio_dir": audio_dir,
    }
