"""WER scoring with SNR / noise-type bucketing, and representation
heatmap export for the clean / disentangled / noisy comparison."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import read_wav
from .features import global_mean_norm, log_mel
from .training import decode_features, model_from_checkpoint


@dataclass
class EditCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    n_ref: int = 0

    @property
    def errors(self):
        return self.sub + self.dele + self.ins

    def add(self, other):
        self.sub += other.sub
        self.dele += other.dele
        self.ins += other.ins
        self.n_ref += other.n_ref

    def wer_percent(self):
        if self.n_ref == 0:
            return 0.0
        return 100.0 * self.errors / self.n_ref


def wer(reference, hypothesis):
    """Minimal-edit-distance word counts (S, D, I, N_ref).

    Inputs are whitespace-tokenized and case-folded.  Ties are broken
    preferring substitution over insertion over deletion.
    """
    ref = reference.lower().split()
    hyp = hypothesis.lower().split()
    R, H = len(ref), len(hyp)
    # dist[i][j]: cost of aligning ref[:i] with hyp[:j]; op tracks the choice
    dist = np.zeros((R + 1, H + 1), dtype=np.int64)
    op = np.zeros((R + 1, H + 1), dtype=np.int8)  # 0 match, 1 sub, 2 ins, 3 del
    dist[:, 0] = np.arange(R + 1)
    op[1:, 0] = 3
    dist[0, :] = np.arange(H + 1)
    op[0, 1:] = 2
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            if ref[i - 1] == hyp[j - 1]:
                dist[i, j] = dist[i - 1, j - 1]
                op[i, j] = 0
                continue
            sub_c = dist[i - 1, j - 1] + 1
            ins_c = dist[i, j - 1] + 1
            del_c = dist[i - 1, j] + 1
            best = min(sub_c, ins_c, del_c)
            dist[i, j] = best
            op[i, j] = 1 if sub_c == best else (2 if ins_c == best else 3)
    counts = EditCounts(n_ref=R)
    i, j = R, H
    while i > 0 or j > 0:
        o = op[i, j]
        if o == 0:
            i, j = i - 1, j - 1
        elif o == 1:
            counts.sub += 1
            i, j = i - 1, j - 1
        elif o == 2:
            counts.ins += 1
            j -= 1
        else:
            counts.dele += 1
            i -= 1
    return counts


@dataclass
class WERReport:
    buckets: dict = field(default_factory=dict)  # key -> EditCounts
    errata: list = field(default_factory=list)
    config_text: str = ""

    def bucket(self, key):
        return self.buckets.setdefault(key, EditCounts())

    def aggregate(self):
        total = EditCounts()
        for c in self.buckets.values():
            total.add(c)
        return total

    def to_dict(self):
        out = {"buckets": {}, "errata": self.errata, "config": self.config_text}
        for key in sorted(self.buckets):
            c = self.buckets[key]
            out["buckets"][key] = {
                "substitutions": c.sub,
                "deletions": c.dele,
                "insertions": c.ins,
                "reference_words": c.n_ref,
                "wer_percent": c.wer_percent(),
                "degenerate": c.n_ref == 0,
            }
        agg = self.aggregate()
        out["aggregate"] = {
            "substitutions": agg.sub,
            "deletions": agg.dele,
            "insertions": agg.ins,
            "reference_words": agg.n_ref,
            "wer_percent": agg.wer_percent(),
        }
        return out

    def to_table(self):
        rows = [("bucket", "S", "D", "I", "N_ref", "WER%")]
        for key in sorted(self.buckets):
            c = self.buckets[key]
            rows.append((key, str(c.sub), str(c.dele), str(c.ins), str(c.n_ref), f"{c.wer_percent():.2f}"))
        agg = self.aggregate()
        rows.append(("ALL", str(agg.sub), str(agg.dele), str(agg.ins), str(agg.n_ref), f"{agg.wer_percent():.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(6)]
        return "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows)


def bucket_key(entry, by_snr=True, by_noise=True):
    if entry.pairing is None:
        return "clean"
    parts = []
    if by_noise:
        parts.append(str(entry.pairing.get("noise_type", "noise")))
    if by_snr:
        parts.append(f"snr{entry.pairing['snr_db']:+g}")
    return "/".join(parts) if parts else "noisy"


def evaluate_set(ckpt, vocab, entries, by_snr=True, by_noise=True):
    """Greedy-decode every utterance and pool error counts per bucket."""
    model = model_from_checkpoint(ckpt, vocab, inference_only=True)
    report = WERReport(config_text=ckpt.config_text)
    for entry in entries:
        if not os.path.exists(entry.audio_path):
            report.errata.append(entry.id)
            continue
        feats = log_mel(read_wav(entry.audio_path))
        if model.norm_stats is not None:
            feats = global_mean_norm(feats, model.norm_stats)
        hyp = decode_features(model, feats.frames)
        report.bucket(bucket_key(entry, by_snr, by_noise)).add(wer(entry.transcript, hyp))
    return report


def export_heatmaps(ckpt, vocab, clean_wav, noisy_wav, out_dir):
    """Write the noisy, disentangled-clean and clean-branch representations
    as CSV matrices plus a metadata JSON with their mean-squared distances.

    Needs a stage >= 2 checkpoint (both branch weight sets)."""
    model = model_from_checkpoint(ckpt, vocab, with_pretrained=True)
    if model.noisyd is None:
        raise ValueError("heatmap export requires a checkpoint with disentanglement tensors")
    clean = read_wav(clean_wav)
    noisy = read_wav(noisy_wav)
    if len(clean) != len(noisy):
        raise ValueError(f"duration mismatch: {clean_wav} has {len(clean)} samples, {noisy_wav} has {len(noisy)}")
    feats = {}
    for name, clip in (("clean", clean), ("noisy", noisy)):
        fm = log_mel(clip)
        if model.norm_stats is not None:
            fm = global_mean_norm(fm, model.norm_stats)
        feats[name] = fm.frames
    h_noisy = model.encoder.encode(feats["noisy"], training=False).data
    h_clean_part = model.noisyd.encoder_c(model.encoder.encode(feats["noisy"], training=False)).data
    h_clean = model.pretrained.encode(feats["clean"], training=False).data
    os.makedirs(out_dir, exist_ok=True)
    named = {
        "h_noisy": h_noisy,
        "h_clean_part": h_clean_part,
        "h_clean": h_clean,
    }
    for name, mat in named.items():
        np.savetxt(os.path.join(out_dir, f"{name}.csv"), mat, delimiter=",")
    d_clean_part = float(np.mean((h_clean_part - h_clean) ** 2))
    d_noisy = float(np.mean((h_noisy - h_clean) ** 2))
    meta = {
        "shape": list(h_noisy.shape),
        "frame_axis": "rows",
        "feature_axis": "columns",
        "mse_clean_part_vs_clean": d_clean_part,
        "mse_noisy_vs_clean": d_noisy,
        "config": ckpt.config_text,
    }
    with open(os.path.join(out_dir, "metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return named, meta


def standardized_mse(a, b):
    """MSE after each matrix is scaled to zero mean, unit variance."""

    def z(m):
        s = m.std()
        return (m - m.mean()) / (s if s > 0 else 1.0)

    return float(np.mean((z(a) - z(b)) ** 2))
