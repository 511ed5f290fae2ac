"""Noisy disentanglement: clean-part encoder, noise-part encoder, and the
reconstruction decoder, plus the consistency and reconstruction MSE losses.

All three sub-modules are four-linear-layer MLPs with ReLU after the first
three layers and a Sigmoid after the last, so outputs lie strictly in
(0, 1).  The decoder's first layer takes the concatenated (2d) input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class NoisyDConfig:
    d_model: int
    hidden: int

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"noisyd hidden width must be >= 1, got {self.hidden}")
        if self.d_model < 1:
            raise ValueError(f"noisyd d_model must be >= 1, got {self.d_model}")


def _mlp_dims(d_in, hidden, d_out):
    return [(d_in, hidden), (hidden, hidden), (hidden, hidden), (hidden, d_out)]


def init_noisyd_params(cfg, rng, prefix="noisyd"):
    p = {}
    for name, d_in in (("encoder_c", cfg.d_model), ("encoder_n", cfg.d_model), ("decoder_cn", 2 * cfg.d_model)):
        for i, (fi, fo) in enumerate(_mlp_dims(d_in, cfg.hidden, cfg.d_model)):
            a = np.sqrt(6.0 / (fi + fo))
            p[f"{prefix}.{name}.l{i}.w"] = ad.Tensor(rng.uniform(-a, a, size=(fi, fo)), requires_grad=True)
            p[f"{prefix}.{name}.l{i}.b"] = ad.Tensor(np.zeros(fo), requires_grad=True)
    return p


def param_count(cfg):
    """Exact weight+bias count of the three sub-modules."""
    total = 0
    for d_in in (cfg.d_model, cfg.d_model, 2 * cfg.d_model):
        for fi, fo in _mlp_dims(d_in, cfg.hidden, cfg.d_model):
            total += fi * fo + fo
    return total


class NoisyDModule:
    def __init__(self, cfg, params=None, rng=None, prefix="noisyd"):
        self.cfg = cfg
        self.prefix = prefix
        if params is None:
            params = init_noisyd_params(cfg, rng if rng is not None else np.random.default_rng(0), prefix)
        self.params = params

    def _mlp(self, name, x, d_in):
        if x.shape[-1] != d_in:
            raise ad.ShapeError(f"{name}: expected width {d_in}, got {x.shape}")
        h = x
        for i in range(4):
            w = self.params[f"{self.prefix}.{name}.l{i}.w"]
            b = self.params[f"{self.prefix}.{name}.l{i}.b"]
            h = ad.add_bias(ad.matmul(h, w), b)
            h = ad.sigmoid(h) if i == 3 else ad.relu(h)
        return h

    def encoder_c(self, h_noisy):
        return self._mlp("encoder_c", h_noisy, self.cfg.d_model)

    def encoder_n(self, h_noisy):
        return self._mlp("encoder_n", h_noisy, self.cfg.d_model)

    def decoder_cn(self, h_clean_part, h_noise_part):
        if h_clean_part.shape != h_noise_part.shape:
            raise ad.ShapeError(
                f"decoder_cn: operand shapes differ {h_clean_part.shape} vs {h_noise_part.shape}"
            )
        return self._mlp("decoder_cn", ad.concat_last(h_clean_part, h_noise_part), 2 * self.cfg.d_model)

    def forward(self, h_noisy):
        """(h_clean_part, h_noise_part, reconstruction), all t x d."""
        hc = self.encoder_c(h_noisy)
        hn = self.encoder_n(h_noisy)
        return hc, hn, self.decoder_cn(hc, hn)

    def param_count(self):
        return param_count(self.cfg)


class IdentityDisentangler:
    """Test stub: clean-part extraction is the identity, no parameters."""

    params = {}

    def encoder_c(self, h_noisy):
        return h_noisy


def l_con(h_clean_ref, h_clean_part):
    """Consistency loss: element-mean squared distance to the clean branch."""
    if h_clean_ref.shape != h_clean_part.shape:
        raise ad.ShapeError(
            f"l_con: shape mismatch {h_clean_ref.shape} vs {h_clean_part.shape} (broken pairing pipeline)"
        )
    return ad.mean_square(ad.sub(h_clean_ref, h_clean_part))


def l_r(recon, h_noisy):
    """Reconstruction loss: element-mean squared error to the noisy input."""
    if recon.shape != h_noisy.shape:
        raise ad.ShapeError(f"l_r: shape mismatch {recon.shape} vs {h_noisy.shape}")
    return ad.mean_square(ad.sub(recon, h_noisy))
