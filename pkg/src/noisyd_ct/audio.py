"""WAV I/O, SNR-exact noise mixing, and noisy-corpus simulation.

Audio is RIFF/WAVE PCM16 mono 16 kHz throughout.  Mixing power is measured
over the full clip (mean squared sample).  Emitted file pairs are built so
that the noise contribution is quantized on the same PCM grid as the clean
signal, which keeps the SNR recomputed from the written files equal to the
requested value to well under 1e-6 dB.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import wave
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
_FULL_SCALE = 32768.0


class AudioError(ValueError):
    pass


class SimulationError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # mono float64 in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if np.isnan(self.samples).any():
            raise AudioError("AudioClip contains NaN samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class ManifestEntry:
    id: str
    audio_path: str
    transcript: str
    pairing: dict | None = None  # clean_path, noise_path, noise_offset_samples,
    #                              snr_db, noise_type (+ renorm_gain)

    def to_json(self):
        obj = {"id": self.id, "audio_path": self.audio_path, "transcript": self.transcript}
        if self.pairing is not None:
            obj["pairing"] = self.pairing
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        obj = json.loads(line)
        return cls(obj["id"], obj["audio_path"], obj["transcript"], obj.get("pairing"))


def read_manifest(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json(line))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


# ---------------------------------------------------------------------------
# WAV I/O


def wav_info(path):
    """(channels, frames, rate, sample_width) without reading payload."""
    with wave.open(os.fspath(path), "rb") as wf:
        return wf.getnchannels(), wf.getnframes(), wf.getframerate(), wf.getsampwidth()


def read_wav_int16(path, channel=None):
    """Raw int16 samples of one channel; validates encoding and rate."""
    with wave.open(os.fspath(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise AudioError(f"{path}: unsupported sample width {wf.getsampwidth()} (PCM16 required)")
        if wf.getcomptype() != "NONE":
            raise AudioError(f"{path}: unsupported encoding {wf.getcomptype()!r}")
        if wf.getframerate() != SAMPLE_RATE:
            raise AudioError(f"{path}: sample rate {wf.getframerate()} Hz, expected {SAMPLE_RATE} Hz")
        nch = wf.getnchannels()
        raw = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    if nch == 1:
        return raw.astype(np.int64)
    if channel is None:
        raise AudioError(f"{path}: {nch}-channel file requires an explicit channel index")
    if not 0 <= channel < nch:
        raise AudioError(f"{path}: channel {channel} out of range for {nch} channels")
    return raw.reshape(-1, nch)[:, channel].astype(np.int64)


def read_wav(path, channel=None):
    return AudioClip(read_wav_int16(path, channel) / _FULL_SCALE)


def quantize(samples):
    """Float [-1, 1] -> int16 grid, round half up, saturating."""
    ints = np.floor(np.asarray(samples, dtype=np.float64) * _FULL_SCALE + 0.5)
    return np.clip(ints, -32768, 32767).astype(np.int64)


def write_wav_int16(path, ints):
    ints = np.asarray(ints)
    if ints.size and (ints.max() > 32767 or ints.min() < -32768):
        raise AudioError(f"{path}: sample values exceed PCM16 range")
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(ints.astype("<i2").tobytes())


def write_wav(path, clip):
    write_wav_int16(path, quantize(clip.samples))


# ---------------------------------------------------------------------------
# SNR mixing


def _power(x):
    return float(np.mean(np.square(x)))


def mix_at_snr(clean, noise, snr_db):
    """Additive mix at an exact SNR.

    Returns (noisy, gain) with noisy = clean + gain * noise and
    gain = sqrt(P_clean / (P_noise * 10^(snr_db / 10))), powers being mean
    squared samples over the full clips.
    """
    c, n = clean.samples, noise.samples
    if len(c) != len(n):
        raise AudioError(f"mix_at_snr: length mismatch {len(c)} vs {len(n)}")
    pc, pn = _power(c), _power(n)
    if pc <= 0.0:
        raise AudioError("mix_at_snr: clean signal has zero power")
    if pn <= 0.0:
        raise AudioError("mix_at_snr: noise segment has zero power")
    gain = math.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    return AudioClip(c + gain * n), gain


# ---------------------------------------------------------------------------
# noise pool


@dataclass
class NoiseSegment:
    path: str
    start: int
    end: int
    noise_type: str
    channels: int

    @property
    def length(self):
        return self.end - self.start


@dataclass
class NoisePartition:
    role: str  # "train" | "test"
    segments: list = field(default_factory=list)

    def noise_types(self):
        return sorted({s.noise_type for s in self.segments})


def build_noise_partitions(noise_dir):
    """Split every noise file at its midpoint: first half train, second test.

    The two partitions are therefore disjoint as sample intervals.  The
    noise type of a file is its parent directory name relative to
    ``noise_dir`` (or the file stem for files directly inside it).
    """
    paths = []
    for root, _dirs, files in os.walk(noise_dir):
        for name in sorted(files):
            if name.lower().endswith(".wav"):
                paths.append(os.path.join(root, name))
    paths.sort()
    if not paths:
        raise SimulationError(f"no wav files found under {noise_dir}")
    train = NoisePartition("train")
    test = NoisePartition("test")
    for path in paths:
        rel = os.path.relpath(path, noise_dir)
        parent = os.path.dirname(rel)
        ntype = parent.replace(os.sep, "/") if parent else os.path.splitext(os.path.basename(rel))[0]
        nch, frames, rate, width = wav_info(path)
        if rate != SAMPLE_RATE:
            raise AudioError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
        mid = frames // 2
        if mid > 0:
            train.segments.append(NoiseSegment(path, 0, mid, ntype, nch))
        if frames - mid > 0:
            test.segments.append(NoiseSegment(path, mid, frames, ntype, nch))
    return {"train": train, "test": test}


def _entry_rng(seed, *tokens):
    """Deterministic per-entry RNG from (seed, tokens); order-independent."""
    digest = hashlib.sha256(("\x1f".join(str(t) for t in tokens)).encode("utf-8")).digest()
    return np.random.default_rng([int(seed)] + [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)])


def _extract_noise(seg, channel, offset, length):
    """Noise samples from a partition segment, wrapping inside the segment."""
    raw = read_wav_int16(seg.path, channel if seg.channels > 1 else None)
    window = raw[seg.start : seg.end] / _FULL_SCALE
    if len(window) == 0:
        raise SimulationError(f"empty noise segment in {seg.path}")
    idx = (offset - seg.start + np.arange(length)) % len(window)
    return window[idx]


def _fit_quantized_gain(clean_q, noise, snr_db):
    """Gain whose *quantized* noise contribution realizes snr_db exactly.

    clean_q is already on the PCM grid.  A few fixed-point corrections push
    the post-quantization noise power onto the target; the residual error is
    far below 1e-6 dB.
    """
    target = _power(clean_q) * 10.0 ** (-snr_db / 10.0)
    pn = _power(noise)
    if pn <= 0.0:
        raise AudioError("noise segment has zero power")
    gain = math.sqrt(target / pn)
    for _ in range(6):
        realized = _power(quantize(gain * noise) / _FULL_SCALE)
        if realized <= 0.0:
            break
        gain *= math.sqrt(target / realized)
    return gain


def _trim_noise_power(noise_int, target_sumsq):
    """Nudge PCM noise words by one LSB until sum(n^2) hits the target.

    Realized noise power is a staircase in the mixing gain, and with tonal
    noise the steps can exceed the 1e-6 dB budget.  Per-word +-1 trims give
    odd-sized sum-of-square moves (2|n|+-1) down to 1, so any integer target
    is reachable; each word is touched at most once.
    """
    n = noise_int.astype(np.int64).copy()
    want = int(round(target_sumsq))
    delta = want - int(np.sum(n * n))
    if delta == 0:
        return n.astype(noise_int.dtype)
    mag = np.abs(n)
    order = np.argsort(mag, kind="stable")  # ascending amplitude
    used = np.zeros(len(n), dtype=bool)
    for _ in range(len(n)):
        if delta == 0:
            break
        if delta > 0:
            # grow a word away from zero: step 2|n|+1, largest step <= delta
            steps = 2 * mag + 1
            ok = ~used & (steps <= delta) & (mag < 32766)
            if not ok.any():
                ok = ~used & (mag < 32766)
                if not ok.any():
                    break
                idx = order[np.argmax(ok[order])]  # smallest overshoot
            else:
                cand = np.nonzero(ok)[0]
                idx = cand[np.argmax(steps[cand])]
            n[idx] += 1 if n[idx] >= 0 else -1
            delta -= 2 * mag[idx] + 1
        else:
            # shrink a word toward zero: step 2|n|-1, largest step <= -delta
            steps = 2 * mag - 1
            ok = ~used & (mag > 0) & (steps <= -delta)
            if not ok.any():
                ok = ~used & (mag > 0)
                if not ok.any():
                    break
                idx = order[np.argmax(ok[order])]  # smallest overshoot
            else:
                cand = np.nonzero(ok)[0]
                idx = cand[np.argmax(steps[cand])]
            n[idx] -= 1 if n[idx] > 0 else -1
            delta += 2 * mag[idx] - 1
        used[idx] = True
        mag[idx] = abs(n[idx])
    return n.astype(noise_int.dtype)


def _emit_pair(clean_q_int, noise, snr_db):
    """Integer PCM words for (clean, noisy) with grid-aligned noise part.

    Returns (clean_int, noisy_int, gain, renorm).  If the mix would clip,
    both members are scaled by the same factor (renorm < 1) and refit.
    """
    renorm = 1.0
    for _ in range(4):
        clean_int = quantize((clean_q_int / _FULL_SCALE) * renorm) if renorm != 1.0 else clean_q_int
        cq = clean_int / _FULL_SCALE
        if _power(cq) <= 0.0:
            raise AudioError("clean signal has zero power")
        gain = _fit_quantized_gain(cq, renorm * noise, snr_db)
        noise_int = quantize(gain * renorm * noise)
        target_sumsq = float(np.sum(clean_int.astype(np.int64) ** 2)) * 10.0 ** (-snr_db / 10.0)
        noise_int = _trim_noise_power(noise_int, target_sumsq)
        noisy_int = clean_int + noise_int
        peak = max(1, int(np.abs(noisy_int).max()))
        if peak <= 32767:
            return clean_int, noisy_int, gain, renorm
        renorm *= 32000.0 / peak
    raise SimulationError("could not renormalize mix into PCM16 range")


def simulate_pair(clean_path, seg, channel, offset, snr_db, out_clean, out_noisy):
    """Mix one utterance and write the pair; returns the pairing block."""
    clean_int = read_wav_int16(clean_path)
    noise = _extract_noise(seg, channel, offset, len(clean_int))
    clean_out, noisy_out, gain, renorm = _emit_pair(clean_int, noise, snr_db)
    if renorm == 1.0:
        clean_written = clean_path
    else:
        write_wav_int16(out_clean, clean_out)
        clean_written = out_clean
    write_wav_int16(out_noisy, noisy_out)
    pairing = {
        "clean_path": clean_written,
        "noise_path": seg.path,
        "noise_offset_samples": int(offset),
        "snr_db": float(snr_db),
        "noise_type": seg.noise_type,
    }
    if renorm != 1.0:
        pairing["renorm_gain"] = float(renorm)
    return pairing


def simulate_corpus(
    clean_entries,
    partition,
    role,
    audio_dir,
    seed,
    snr_min=-5.0,
    snr_max=15.0,
    snr_fixed=None,
    noise_type=None,
    id_suffix="noisy",
):
    """Noisy counterpart for every clean entry; pure function of its inputs.

    Training draws snr_db ~ Uniform[snr_min, snr_max]; test sets pass a
    fixed ``snr_fixed`` from the evaluation grid.  Per-entry randomness is
    derived from (seed, id, suffix) so output does not depend on iteration
    order or parallelism.
    """
    if partition.role != role:
        raise SimulationError(f"requested {role!r} simulation against a {partition.role!r} noise partition")
    segments = partition.segments
    if noise_type is not None:
        segments = [s for s in segments if s.noise_type == noise_type]
    if not segments:
        raise SimulationError(f"noise pool has no segments (noise_type={noise_type!r})")
    os.makedirs(audio_dir, exist_ok=True)
    out = []
    for entry in clean_entries:
        rng = _entry_rng(seed, entry.id, id_suffix)
        seg = segments[int(rng.integers(len(segments)))]
        channel = int(rng.integers(seg.channels)) if seg.channels > 1 else 0
        offset = int(rng.integers(seg.start, seg.end))
        snr = float(snr_fixed) if snr_fixed is not None else float(rng.uniform(snr_min, snr_max))
        new_id = f"{entry.id}-{id_suffix}"
        pairing = simulate_pair(
            entry.audio_path,
            seg,
            channel,
            offset,
            snr,
            os.path.join(audio_dir, f"{new_id}.clean.wav"),
            os.path.join(audio_dir, f"{new_id}.wav"),
        )
        out.append(
            ManifestEntry(
                id=new_id,
                audio_path=os.path.join(audio_dir, f"{new_id}.wav"),
                transcript=entry.transcript,
                pairing=pairing,
            )
        )
    out.sort(key=lambda e: e.id)
    return out
