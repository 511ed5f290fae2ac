"""WAV I/O, SNR-exact mixing, and corpus simulation contracts."""

import wave

import numpy as np
import pytest

from noisyd_ct.audio import (
    AudioClip,
    AudioError,
    ManifestEntry,
    SimulationError,
    build_noise_partitions,
    mix_at_snr,
    quantize,
    read_manifest,
    read_wav,
    read_wav_int16,
    simulate_corpus,
    write_manifest,
    write_wav,
    write_wav_int16,
)

rng = np.random.default_rng(31)


def write_raw_wav(path, ints, rate=16000, channels=1, sampwidth=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(sampwidth)
        w.setframerate(rate)
        w.writeframes(ints.astype("<i2").tobytes())


def test_pcm_round_trip_exact(tmp_path):
    ramp = np.arange(160, dtype=np.int64) * 100 - 8000
    p = tmp_path / "ramp.wav"
    write_wav_int16(p, ramp)
    np.testing.assert_array_equal(read_wav_int16(p), ramp)


def test_float_round_trip_within_quantization(tmp_path):
    clip = AudioClip(samples=rng.uniform(-0.9, 0.9, 400), sample_rate=16000)
    p = tmp_path / "x.wav"
    write_wav(p, clip)
    back = read_wav(p)
    assert np.abs(back.samples - clip.samples).max() <= 0.5 / 32768


def test_stereo_requires_channel_index(tmp_path):
    data = np.zeros(400, dtype=np.int64)
    p = tmp_path / "st.wav"
    write_raw_wav(p, np.repeat(data, 2), channels=2)
    with pytest.raises(AudioError):
        read_wav_int16(p)
    assert len(read_wav_int16(p, channel=1)) == 400


def test_wrong_rate_error_names_rate(tmp_path):
    p = tmp_path / "slow.wav"
    write_raw_wav(p, np.zeros(400, dtype=np.int64), rate=8000)
    with pytest.raises(AudioError, match="8000"):
        read_wav_int16(p)


def test_quantize_is_round_half_up_and_saturating():
    out = quantize(np.array([0.0, 1.0, -1.0, 0.5 / 32768]))
    assert out[1] == 32767 and out[2] == -32768
    assert out[3] == 1


def test_mix_gain_closed_forms():
    clean = AudioClip(samples=rng.standard_normal(1600) * 0.1, sample_rate=16000)
    p = np.sqrt(np.mean(clean.samples**2) / np.mean(clean.samples**2))
    noise = AudioClip(samples=clean.samples.copy(), sample_rate=16000)
    _, gain0 = mix_at_snr(clean, noise, 0.0)
    assert abs(gain0 - p) < 1e-12
    _, gain20 = mix_at_snr(clean, noise, 20.0)
    assert abs(gain20 - 0.1) < 1e-12


def test_mix_realized_snr():
    t = np.arange(16000) / 16000.0
    clean = AudioClip(samples=0.5 * np.sin(2 * np.pi * 440 * t), sample_rate=16000)
    noise = AudioClip(samples=rng.uniform(-1, 1, 16000), sample_rate=16000)
    noisy, gain = mix_at_snr(clean, noise, 7.0)
    scaled = noisy.samples - clean.samples
    snr = 10 * np.log10(np.mean(clean.samples**2) / np.mean(scaled**2))
    assert abs(snr - 7.0) < 1e-6


def test_mix_rejects_zero_power():
    clean = AudioClip(samples=np.zeros(100), sample_rate=16000)
    noise = AudioClip(samples=np.ones(100), sample_rate=16000)
    with pytest.raises(AudioError):
        mix_at_snr(clean, noise, 0.0)
    with pytest.raises(AudioError):
        mix_at_snr(noise, clean, 0.0)


def test_manifest_round_trip(tmp_path):
    entries = [
        ManifestEntry(id="u1", audio_path="a.wav", transcript="a b"),
        ManifestEntry(
            id="u2",
            audio_path="b.wav",
            transcript="c",
            pairing={"clean_path": "a.wav", "noise_path": "n.wav",
                     "noise_offset_samples": 3, "snr_db": 5.0, "noise_type": "static"},
        ),
    ]
    p = tmp_path / "m.jsonl"
    write_manifest(p, entries)
    back = read_manifest(p)
    assert [e.id for e in back] == ["u1", "u2"]
    assert back[1].pairing["snr_db"] == 5.0


@pytest.fixture()
def tiny_pool(tmp_path):
    """Two noise types, one clean manifest with three utterances."""
    for ntype, gen in (
        ("static", lambda n: rng.uniform(-0.3, 0.3, n)),
        ("hum", lambda n: 0.2 * np.sin(np.arange(n) * 0.07)),
    ):
        d = tmp_path / "noise" / ntype
        d.mkdir(parents=True)
        write_wav(d / f"{ntype}.wav", AudioClip(samples=gen(32000), sample_rate=16000))
    entries = []
    audio = tmp_path / "audio"
    audio.mkdir()
    for i in range(3):
        path = audio / f"u{i}.wav"
        write_wav(path, AudioClip(samples=0.3 * np.sin(np.arange(8000) * (0.05 + 0.01 * i)),
                                  sample_rate=16000))
        entries.append(ManifestEntry(id=f"u{i}", audio_path=str(path), transcript="a b c"))
    return tmp_path, entries


def test_noise_partitions_are_disjoint(tiny_pool):
    root, _ = tiny_pool
    parts = build_noise_partitions(root / "noise")
    for tr in parts["train"].segments:
        for te in parts["test"].segments:
            if tr.path == te.path:
                assert tr.end <= te.start or te.end <= tr.start


def test_simulate_corpus_deterministic_and_order_independent(tiny_pool, tmp_path):
    root, entries = tiny_pool
    kw = dict(partition=build_noise_partitions(root / "noise")["train"],
              role="train", seed=9, snr_min=-5.0, snr_max=15.0)
    out1 = simulate_corpus(entries, audio_dir=tmp_path / "o1", **kw)
    out2 = simulate_corpus(list(reversed(entries)), audio_dir=tmp_path / "o2", **kw)
    assert [e.id for e in out1] == [e.id for e in out2]
    for a, b in zip(out1, out2):
        assert a.pairing["snr_db"] == b.pairing["snr_db"]
        assert a.pairing["noise_offset_samples"] == b.pairing["noise_offset_samples"]


def test_simulate_corpus_partition_role_mismatch(tiny_pool, tmp_path):
    root, entries = tiny_pool
    parts = build_noise_partitions(root / "noise")
    with pytest.raises(SimulationError):
        simulate_corpus(entries, partition=parts["test"], role="train",
                        audio_dir=tmp_path / "o", seed=1, snr_min=0.0, snr_max=0.0)


def test_emitted_pairs_reproduce_snr(tiny_pool, tmp_path):
    root, entries = tiny_pool
    parts = build_noise_partitions(root / "noise")
    out = simulate_corpus(entries, partition=parts["train"], role="train",
                          audio_dir=tmp_path / "o", seed=5, snr_min=-5.0, snr_max=15.0)
    for e in out:
        noisy = read_wav(e.audio_path).samples
        clean = read_wav(e.pairing["clean_path"]).samples
        snr = 10 * np.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))
        assert abs(snr - e.pairing["snr_db"]) < 1e-6
        assert -5.0 <= e.pairing["snr_db"] <= 15.0


def test_fixed_grid_snr(tiny_pool, tmp_path):
    root, entries = tiny_pool
    parts = build_noise_partitions(root / "noise")
    out = simulate_corpus(entries, partition=parts["test"], role="test",
                          audio_dir=tmp_path / "o", seed=5,
                          snr_fixed=-5.0, noise_type="static", id_suffix="static-snr-5")
    assert len(out) == len(entries)
    for e in out:
        assert e.pairing["snr_db"] == -5.0
        assert e.pairing["noise_type"] == "static"
