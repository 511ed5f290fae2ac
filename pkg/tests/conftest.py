"""Shared miniature corpus and config fixtures."""

import pytest

CRITERION_LINES = []


def record_criterion(line):
    """Collect a one-line verdict for the end-of-run summary."""
    CRITERION_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)

from noisyd_ct.audio import build_noise_partitions, read_manifest, simulate_corpus
from noisyd_ct.config import RunConfig
from noisyd_ct.toy_corpus import make_toy_corpus
from noisyd_ct.transducer import Vocabulary


def tiny_config():
    cfg = RunConfig()
    cfg["encoder.layers"] = 2
    cfg["encoder.d_model"] = 16
    cfg["encoder.heads"] = 2
    cfg["encoder.ffn_dim"] = 24
    cfg["encoder.conv_kernel"] = 3
    cfg["encoder.dropout"] = 0.0
    cfg["noisyd.hidden"] = 16
    cfg["schedule.peak_lr"] = 1e-3
    cfg["schedule.warmup_steps"] = 50
    cfg["train.batch_size"] = 4
    return cfg


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """A few clean utterances, a noisy counterpart set, and test mixes."""
    root = tmp_path_factory.mktemp("mini")
    info = make_toy_corpus(root / "corpus", n_train=8, n_test=4, seed=13,
                           noise_seconds=12)
    clean_train = read_manifest(info["clean_train"])
    clean_test = read_manifest(info["clean_test"])
    parts = build_noise_partitions(info["noise_dir"])
    train_noisy = simulate_corpus(clean_train, partition=parts["train"], role="train",
                                  audio_dir=root / "sim" / "train", seed=3,
                                  snr_min=-5.0, snr_max=15.0)
    test_noisy = []
    for ntype in parts["test"].noise_types():
        test_noisy += simulate_corpus(clean_test, partition=parts["test"], role="test",
                                      audio_dir=root / "sim" / "test", seed=4,
                                      snr_fixed=0.0, noise_type=ntype,
                                      id_suffix=f"{ntype}-snr+0")
    vocab = Vocabulary.from_corpus([e.transcript for e in clean_train])
    return {
        "root": root,
        "clean_train": clean_train,
        "clean_test": clean_test,
        "train_noisy": train_noisy,
        "test_noisy": test_noisy,
        "paired": clean_train + train_noisy,
        "vocab": vocab,
        "noise_dir": info["noise_dir"],
    }
