"""End-to-end command-line contracts: flags, exit codes, determinism."""

import json

import pytest

from noisyd_ct.cli import main
from noisyd_ct.toy_corpus import make_toy_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    info = make_toy_corpus(root / "corpus", n_train=6, n_test=3, seed=21,
                           noise_seconds=10)
    cfg = root / "toy.cfg"
    cfg.write_text(
        "# desk-scale run\n"
        "encoder.layers = 1\n"
        "encoder.d_model = 16\n"
        "encoder.heads = 2\n"
        "encoder.ffn_dim = 24\n"
        "encoder.conv_kernel = 3\n"
        "encoder.dropout = 0.0\n"
        "noisyd.hidden = 12\n"
        "schedule.warmup_steps = 20\n"
        "train.batch_size = 2\n"
    )
    return root, info, cfg


def run(*argv):
    return main([str(a) for a in argv])


def test_help_exits_zero(capsys):
    for sub in ("simulate", "train", "eval", "visualize", "params"):
        with pytest.raises(SystemExit) as exc:
            run(sub, "--help")
        assert exc.value.code == 0
        capsys.readouterr()


def test_unknown_config_key_rejected(workspace, tmp_path, capsys):
    root, info, _ = workspace
    bad = tmp_path / "bad.cfg"
    bad.write_text("encoder.bogus = 3\n")
    rc = run("train", "--stage", 1, "--config", bad,
             "--data", info["clean_train"], "--out", tmp_path / "x.ckpt",
             "--seed", 0, "--steps", 1)
    assert rc != 0
    assert "error:" in capsys.readouterr().err


def test_simulate_range_and_grid(workspace, capsys):
    root, info, _ = workspace
    rc = run("simulate", "--clean-manifest", info["clean_train"],
             "--noise-dir", info["noise_dir"], "--partition", "train",
             "--snr-min", -5, "--snr-max", 15, "--seed", 3,
             "--out", root / "train_noisy.jsonl",
             "--audio-out", root / "sim_train")
    assert rc == 0
    lines = (root / "train_noisy.jsonl").read_text().splitlines()
    assert len(lines) == 6
    for line in lines:
        e = json.loads(line)
        assert -5.0 <= e["pairing"]["snr_db"] <= 15.0

    rc = run("simulate", "--clean-manifest", info["clean_test"],
             "--noise-dir", info["noise_dir"], "--partition", "test",
             "--snr-grid", "-5,0,5,10,15", "--seed", 4,
             "--out", root / "test.jsonl", "--audio-out", root / "sim_test")
    assert rc == 0
    # grid mode: one manifest per (noise type, snr)
    grids = sorted(p.name for p in root.glob("test.*-snr*.jsonl"))
    assert len(grids) == 10  # 2 noise types x 5 SNRs
    capsys.readouterr()


def test_simulate_deterministic(workspace, tmp_path):
    root, info, _ = workspace
    outs = []
    for name in ("a", "b"):
        run("simulate", "--clean-manifest", info["clean_train"],
            "--noise-dir", info["noise_dir"], "--partition", "train",
            "--snr-min", 0, "--snr-max", 10, "--seed", 9,
            "--out", tmp_path / f"{name}.jsonl",
            "--audio-out", tmp_path / f"audio_{name}")
        entries = []
        for line in (tmp_path / f"{name}.jsonl").read_text().splitlines():
            e = json.loads(line)
            e["wav"] = open(e.pop("audio_path"), "rb").read()
            entries.append(e)
        outs.append(entries)
    assert outs[0] == outs[1]


def test_stage2_without_init_is_error(workspace, tmp_path, capsys):
    root, info, cfg = workspace
    rc = run("train", "--stage", 2, "--config", cfg,
             "--data", root / "train_noisy.jsonl",
             "--out", tmp_path / "s2.ckpt", "--seed", 0, "--steps", 1)
    assert rc != 0
    err = capsys.readouterr().err
    assert "init" in err or "checkpoint" in err


def test_full_pipeline(workspace, capsys):
    root, info, cfg = workspace
    paired = root / "paired.jsonl"
    paired.write_text((root / "corpus" / "clean_train.jsonl").read_text()
                      + (root / "train_noisy.jsonl").read_text())
    assert run("train", "--stage", 1, "--config", cfg,
               "--data", info["clean_train"], "--out", root / "s1.ckpt",
               "--seed", 11, "--steps", 4) == 0
    assert run("train", "--stage", 2, "--config", cfg,
               "--data", paired, "--init", root / "s1.ckpt",
               "--out", root / "s2.ckpt", "--seed", 11, "--steps", 3) == 0
    assert run("train", "--stage", 3, "--config", cfg,
               "--data", paired, "--init", root / "s2.ckpt",
               "--out", root / "s3.ckpt", "--seed", 11, "--steps", 3) == 0
    # per-step log decomposes
    for line in (root / "s3.ckpt.log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"step", "lr", "ctc", "rnnt", "l_con", "l_r", "total"}
    assert run("eval", "--checkpoint", root / "s3.ckpt",
               "--manifest", root / "test.static-snr+0.jsonl",
               "--by-snr", "--by-noise", "--out", root / "eval.json") == 0
    rep = json.loads((root / "eval.json").read_text())
    assert "static/snr+0" in rep["buckets"]
    noisy_wavs = sorted((root / "sim_test").glob("*-static-snr+0.wav"))
    clean = json.loads((root / "corpus" / "clean_test.jsonl").read_text()
                       .splitlines()[0])["audio_path"]
    assert run("visualize", "--checkpoint", root / "s3.ckpt",
               "--clean", clean, "--noisy", noisy_wavs[0],
               "--out", root / "viz") == 0
    for f in ("h_noisy.csv", "h_clean_part.csv", "h_clean.csv", "metadata.json"):
        assert (root / "viz" / f).exists()
    capsys.readouterr()


def test_train_determinism(workspace, tmp_path, capsys):
    root, info, cfg = workspace
    for out in ("r1.ckpt", "r2.ckpt"):
        assert run("train", "--stage", 1, "--config", cfg,
                   "--data", info["clean_train"], "--out", tmp_path / out,
                   "--seed", 5, "--steps", 3) == 0
    assert (tmp_path / "r1.ckpt").read_bytes() == (tmp_path / "r2.ckpt").read_bytes()
    capsys.readouterr()


def test_eval_report_determinism(workspace, tmp_path, capsys):
    root, info, cfg = workspace
    for out in ("e1.json", "e2.json"):
        assert run("eval", "--checkpoint", root / "s1.ckpt",
                   "--manifest", info["clean_test"],
                   "--out", tmp_path / out) == 0
    assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()
    capsys.readouterr()


def test_params_reports_reference_budget(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("encoder.layers = 15\nencoder.d_model = 256\n"
                   "encoder.heads = 4\nencoder.ffn_dim = 1024\n"
                   "noisyd.hidden = 400\n")
    assert run("params", "--config", cfg) == 0
    out = capsys.readouterr().out
    assert "1681168" in out
