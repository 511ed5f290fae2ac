"""Flat ``key = value`` run configuration with dotted keys.

Unknown keys are rejected; every key has a documented default.  The
effective configuration is echoed into checkpoints, reports and other
output artifacts so any run can be reproduced from its outputs.
"""

from __future__ import annotations

import os

# key -> (default, type, description)
DEFAULTS = {
    "encoder.layers": (2, int, "number of Conformer blocks"),
    "encoder.d_model": (32, int, "model width (also decoder/joint width)"),
    "encoder.heads": (2, int, "self-attention heads"),
    "encoder.ffn_dim": (64, int, "feed-forward inner width"),
    "encoder.conv_kernel": (7, int, "depthwise convolution kernel (odd)"),
    "encoder.dropout": (0.1, float, "dropout rate"),
    "encoder.max_positions": (512, int, "learned positional embedding capacity"),
    "noisyd.hidden": (32, int, "hidden width of the disentanglement MLPs"),
    "loss.mu": (0.3, float, "CTC loss weight"),
    "loss.gamma": (1.0, float, "transducer loss weight"),
    "loss.alpha": (0.3, float, "consistency loss weight"),
    "loss.beta": (1.0, float, "reconstruction loss weight"),
    "schedule.peak_lr": (1e-3, float, "peak learning rate"),
    "schedule.warmup_steps": (1000, int, "warmup steps of the Noam-style schedule"),
    "train.batch_size": (8, int, "utterances per optimizer step"),
    "specaugment.time_masks": (2, int, "number of time masks"),
    "specaugment.time_width": (40, int, "max time mask width (frames)"),
    "specaugment.freq_masks": (2, int, "number of frequency masks"),
    "specaugment.freq_width": (27, int, "max frequency mask width (bins)"),
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated flat configuration; attribute access via ``cfg["key"]``."""

    def __init__(self, overrides=None):
        self._values = {k: v[0] for k, v in DEFAULTS.items()}
        for k, v in (overrides or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        typ = DEFAULTS[key][1]
        try:
            self._values[key] = typ(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {value!r} (expected {typ.__name__})")

    def __setitem__(self, key, value):
        self.set(key, value)

    def __getitem__(self, key):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        return self._values[key]

    def as_dict(self):
        return dict(self._values)

    def to_text(self):
        return "".join(f"{k} = {self._values[k]}\n" for k in sorted(self._values))

    @classmethod
    def from_text(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def feeder_threads():
    """Worker cap from NOISYD_CT_THREADS (>=1); modules parallelize up to it."""
    raw = os.environ.get("NOISYD_CT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
