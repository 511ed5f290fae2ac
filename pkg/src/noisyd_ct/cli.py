"""Command-line entry point: simulate / train / eval / visualize / params."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import audio
from .config import ConfigError, RunConfig
from .conformer import BackboneConfig, ConformerEncoder
from .evaluation import evaluate_set, export_heatmaps
from .noisyd import NoisyDConfig, param_count
from .training import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    stage1_pretrain,
    stage2_noisyd_train,
    stage3_finetune,
)
from .transducer import TransducerDecoder, Vocabulary


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


def _load_config(path):
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise CliError("io", f"config file not found: {path}")
    except ConfigError as exc:
        raise CliError("config", str(exc))


def _vocab_path(args, checkpoint_path):
    return args.vocab if args.vocab else checkpoint_path + ".vocab.tsv"


def _write_meta(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_simulate(args):
    try:
        entries = audio.read_manifest(args.clean_manifest)
    except FileNotFoundError:
        raise CliError("io", f"clean manifest not found: {args.clean_manifest}")
    partitions = audio.build_noise_partitions(args.noise_dir)
    partition = partitions[args.partition]
    audio_dir = args.audio_out or os.path.splitext(args.out)[0] + "_audio"
    meta = {
        "clean_manifest": args.clean_manifest,
        "noise_dir": args.noise_dir,
        "partition": args.partition,
        "seed": args.seed,
        "snr_min": args.snr_min,
        "snr_max": args.snr_max,
        "snr_grid": args.snr_grid,
    }
    if args.snr_grid:
        grid = [float(v) for v in args.snr_grid.split(",")]
        stem, ext = os.path.splitext(args.out)
        written = []
        for ntype in partition.noise_types():
            for snr in grid:
                suffix = f"{ntype.replace('/', '_')}-snr{snr:+g}"
                out_path = f"{stem}.{suffix}{ext or '.jsonl'}"
                sim = audio.simulate_corpus(
                    entries,
                    partition,
                    args.partition,
                    audio_dir,
                    args.seed,
                    snr_fixed=snr,
                    noise_type=ntype,
                    id_suffix=suffix,
                )
                audio.write_manifest(out_path, sim)
                written.append(out_path)
        meta["outputs"] = written
        _write_meta(args.out + ".meta.json", meta)
    else:
        sim = audio.simulate_corpus(
            entries,
            partition,
            args.partition,
            audio_dir,
            args.seed,
            snr_min=args.snr_min,
            snr_max=args.snr_max,
        )
        audio.write_manifest(args.out, sim)
        meta["outputs"] = [args.out]
        _write_meta(args.out + ".meta.json", meta)
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    try:
        entries = audio.read_manifest(args.data)
    except FileNotFoundError:
        raise CliError("io", f"data manifest not found: {args.data}")
    log_path = args.out + ".log.jsonl"
    if args.stage == 1:
        vocab = Vocabulary.load_tsv(args.vocab) if args.vocab else None
        model = stage1_pretrain(entries, cfg, args.steps, args.seed, vocab=vocab, log_path=log_path)
    else:
        if not args.init:
            raise CliError("usage", f"train --stage {args.stage} requires --init with the previous stage's checkpoint")
        ckpt = load_checkpoint(args.init)
        vocab = Vocabulary.load_tsv(_vocab_path(args, args.init))
        if args.stage == 2:
            model = stage2_noisyd_train(ckpt, entries, cfg, args.steps, args.seed, vocab, log_path=log_path)
        else:
            model = stage3_finetune(ckpt, entries, cfg, args.steps, args.seed, vocab, log_path=log_path)
    save_checkpoint(args.out, model.to_checkpoint(args.stage))
    model.vocab.save_tsv(args.out + ".vocab.tsv")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load_tsv(_vocab_path(args, args.checkpoint))
    entries = audio.read_manifest(args.manifest)
    report = evaluate_set(ckpt, vocab, entries, by_snr=args.by_snr, by_noise=args.by_noise)
    if args.out:
        _write_meta(args.out, report.to_dict())
    print(report.to_table())
    return 0


def cmd_visualize(args):
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load_tsv(_vocab_path(args, args.checkpoint))
    _mats, meta = export_heatmaps(ckpt, vocab, args.clean, args.noisy, args.out)
    print(json.dumps({k: v for k, v in meta.items() if k.startswith("mse")}, sort_keys=True))
    return 0


def cmd_params(args):
    cfg = _load_config(args.config)
    bcfg = BackboneConfig(
        num_layers=cfg["encoder.layers"],
        d_model=cfg["encoder.d_model"],
        num_heads=cfg["encoder.heads"],
        ffn_dim=cfg["encoder.ffn_dim"],
        conv_kernel=cfg["encoder.conv_kernel"],
        dropout=cfg["encoder.dropout"],
        max_positions=cfg["encoder.max_positions"],
    )
    encoder = ConformerEncoder(bcfg)
    decoder = TransducerDecoder(args.vocab_size, bcfg.d_model)
    noisyd_n = param_count(NoisyDConfig(bcfg.d_model, cfg["noisyd.hidden"]))
    print(f"encoder_params {encoder.param_count()}")
    print(f"decoder_params {decoder.param_count()} (vocab_size {args.vocab_size})")
    print(f"noisyd_params {noisyd_n}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="noisyd-ct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="SNR-controlled noisy corpus simulation")
    p.add_argument("--clean-manifest", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--partition", choices=("train", "test"), required=True)
    p.add_argument("--snr-min", type=float, default=-5.0)
    p.add_argument("--snr-max", type=float, default=15.0)
    p.add_argument("--snr-grid", default=None, help='fixed test SNRs, e.g. "-5,0,5,10,15"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--audio-out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="tri-stage training")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="WER evaluation with bucketed reporting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--by-snr", action="store_true")
    p.add_argument("--by-noise", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="representation heatmap export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("params", help="parameter-count report")
    p.add_argument("--config", default=None)
    p.add_argument("--vocab-size", type=int, default=29)
    p.set_defaults(func=cmd_params)

    return parser


def _join_grid_values(argv):
    # argparse mistakes a leading "-5,0,..." grid value for an option flag,
    # so fold it into the --snr-grid token before parsing
    out = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == "--snr-grid" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--snr-grid={argv[i + 1]}")
            i += 2
        else:
            out.append(arg)
            i += 1
    return out


def main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(_join_grid_values(list(argv)))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError,) as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error:checkpoint: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"error:data: {exc}", file=sys.stderr)
        return 4
    except (audio.AudioError, audio.SimulationError) as exc:
        print(f"error:audio: {exc}", file=sys.stderr)
        return 5
    except FileNotFoundError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
