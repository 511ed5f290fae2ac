"""Conformer encoder: strided convolutional subsampler plus block stack.

Each block applies, in order: half-step feed-forward residual, multi-head
self-attention residual, convolution-module residual, a second half-step
feed-forward residual, and a final layer norm.  Positional information
comes from learned absolute embeddings added after subsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import N_MELS


@dataclass
class BackboneConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    conv_kernel: int = 7
    dropout: float = 0.1
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel {self.conv_kernel} must be odd")


def subsampled_length(T):
    """Output length of the 4x subsampler: sub(sub(T)), sub(n) = (n-1)//2 + 1."""
    sub = lambda n: (n - 1) // 2 + 1
    return sub(sub(T))


def _xavier(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def _param(params, name, value):
    t = ad.Tensor(value, requires_grad=True)
    params[name] = t
    return t


def init_encoder_params(cfg, rng, prefix="encoder"):
    """Named parameter tensors of the subsampler + block stack."""
    d, ffn, k = cfg.d_model, cfg.ffn_dim, cfg.conv_kernel
    c1, c2 = max(1, d // 2), d
    fdim = c2 * (((N_MELS - 1) // 2 + 1 - 1) // 2 + 1)  # channels x subsampled mel axis
    p = {}
    _param(p, f"{prefix}.sub.conv1.w", _xavier(rng, 9, c1 * 9, (c1, 1, 3, 3)))
    _param(p, f"{prefix}.sub.conv1.b", np.zeros(c1))
    _param(p, f"{prefix}.sub.conv2.w", _xavier(rng, c1 * 9, c2 * 9, (c2, c1, 3, 3)))
    _param(p, f"{prefix}.sub.conv2.b", np.zeros(c2))
    _param(p, f"{prefix}.sub.proj.w", _xavier(rng, fdim, d))
    _param(p, f"{prefix}.sub.proj.b", np.zeros(d))
    _param(p, f"{prefix}.sub.pos", 0.02 * rng.standard_normal((cfg.max_positions, d)))
    for i in range(cfg.num_layers):
        b = f"{prefix}.block{i}"
        for half in ("ffn1", "ffn2"):
            _param(p, f"{b}.{half}.ln.g", np.ones(d))
            _param(p, f"{b}.{half}.ln.b", np.zeros(d))
            _param(p, f"{b}.{half}.w1", _xavier(rng, d, ffn))
            _param(p, f"{b}.{half}.b1", np.zeros(ffn))
            _param(p, f"{b}.{half}.w2", _xavier(rng, ffn, d))
            _param(p, f"{b}.{half}.b2", np.zeros(d))
        _param(p, f"{b}.mhsa.ln.g", np.ones(d))
        _param(p, f"{b}.mhsa.ln.b", np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            _param(p, f"{b}.mhsa.w{proj}", _xavier(rng, d, d))
            _param(p, f"{b}.mhsa.b{proj}", np.zeros(d))
        _param(p, f"{b}.conv.ln.g", np.ones(d))
        _param(p, f"{b}.conv.ln.b", np.zeros(d))
        _param(p, f"{b}.conv.pw1.w", _xavier(rng, d, 2 * d))
        _param(p, f"{b}.conv.pw1.b", np.zeros(2 * d))
        _param(p, f"{b}.conv.dw.w", _xavier(rng, k, k * d, (k, d)))
        _param(p, f"{b}.conv.dw.b", np.zeros(d))
        _param(p, f"{b}.conv.norm.g", np.ones(d))
        _param(p, f"{b}.conv.norm.b", np.zeros(d))
        _param(p, f"{b}.conv.pw2.w", _xavier(rng, d, d))
        _param(p, f"{b}.conv.pw2.b", np.zeros(d))
        _param(p, f"{b}.final_ln.g", np.ones(d))
        _param(p, f"{b}.final_ln.b", np.zeros(d))
    return p


class ConformerEncoder:
    """Maps a T x 80 feature matrix to a t x d_model representation."""

    def __init__(self, cfg, params=None, rng=None, prefix="encoder"):
        self.cfg = cfg
        self.prefix = prefix
        if params is None:
            params = init_encoder_params(cfg, rng if rng is not None else np.random.default_rng(0), prefix)
        self.params = params

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def feature_encoder(self, x):
        """Two stride-2 3x3 convolutions over (time, mel), then projection."""
        if isinstance(x, np.ndarray):
            x = ad.Tensor(x)
        T = x.shape[0]
        if T < 4:
            raise ad.ShapeError(f"feature_encoder: need at least 4 frames, got {T}")
        img = ad.reshape(x, (1, T, N_MELS))
        h = ad.relu(ad.conv2d(img, self._p("sub.conv1.w"), self._p("sub.conv1.b"), stride=2, padding=1))
        h = ad.relu(ad.conv2d(h, self._p("sub.conv2.w"), self._p("sub.conv2.b"), stride=2, padding=1))
        c2, t, f = h.shape
        # (c, t, f) -> (t, c*f)
        h = ad.reshape(ad.transpose(ad.reshape(h, (c2, t * f))), (t, c2 * f))
        z = ad.add_bias(ad.matmul(h, self._p("sub.proj.w")), self._p("sub.proj.b"))
        pos = ad.rows(self._p("sub.pos"), np.arange(t))
        return ad.add(z, pos)

    def _ffn(self, z, b, half, training, rng):
        cfg = self.cfg
        h = ad.layer_norm(z, self._p(f"{b}.{half}.ln.g"), self._p(f"{b}.{half}.ln.b"))
        h = ad.swish(ad.add_bias(ad.matmul(h, self._p(f"{b}.{half}.w1")), self._p(f"{b}.{half}.b1")))
        h = ad.dropout(h, cfg.dropout, rng, training)
        h = ad.add_bias(ad.matmul(h, self._p(f"{b}.{half}.w2")), self._p(f"{b}.{half}.b2"))
        return ad.dropout(h, cfg.dropout, rng, training)

    def _mhsa(self, z, b, training, rng):
        cfg = self.cfg
        d, nh = cfg.d_model, cfg.num_heads
        dh = d // nh
        h = ad.layer_norm(z, self._p(f"{b}.mhsa.ln.g"), self._p(f"{b}.mhsa.ln.b"))
        q = ad.add_bias(ad.matmul(h, self._p(f"{b}.mhsa.wq")), self._p(f"{b}.mhsa.bq"))
        k = ad.add_bias(ad.matmul(h, self._p(f"{b}.mhsa.wk")), self._p(f"{b}.mhsa.bk"))
        v = ad.add_bias(ad.matmul(h, self._p(f"{b}.mhsa.wv")), self._p(f"{b}.mhsa.bv"))
        heads = []
        for i in range(nh):
            qi = ad.slice_last(q, i * dh, (i + 1) * dh)
            ki = ad.slice_last(k, i * dh, (i + 1) * dh)
            vi = ad.slice_last(v, i * dh, (i + 1) * dh)
            scores = ad.scale(ad.matmul(qi, ad.transpose(ki)), 1.0 / np.sqrt(dh))
            heads.append(ad.matmul(ad.softmax(scores), vi))
        ctx = heads[0]
        for hpart in heads[1:]:
            ctx = ad.concat_last(ctx, hpart)
        out = ad.add_bias(ad.matmul(ctx, self._p(f"{b}.mhsa.wo")), self._p(f"{b}.mhsa.bo"))
        return ad.dropout(out, cfg.dropout, rng, training)

    def _conv_module(self, z, b, training, rng):
        cfg = self.cfg
        d = cfg.d_model
        h = ad.layer_norm(z, self._p(f"{b}.conv.ln.g"), self._p(f"{b}.conv.ln.b"))
        h = ad.add_bias(ad.matmul(h, self._p(f"{b}.conv.pw1.w")), self._p(f"{b}.conv.pw1.b"))
        # gated linear unit
        h = ad.mul(ad.slice_last(h, 0, d), ad.sigmoid(ad.slice_last(h, d, 2 * d)))
        h = ad.depthwise_conv1d(h, self._p(f"{b}.conv.dw.w"), self._p(f"{b}.conv.dw.b"))
        # layer-norm style channel norm keeps single-utterance determinism
        h = ad.layer_norm(h, self._p(f"{b}.conv.norm.g"), self._p(f"{b}.conv.norm.b"))
        h = ad.swish(h)
        h = ad.add_bias(ad.matmul(h, self._p(f"{b}.conv.pw2.w")), self._p(f"{b}.conv.pw2.b"))
        return ad.dropout(h, cfg.dropout, rng, training)

    def conformer_block(self, z, index, training=False, rng=None):
        b = f"block{index}"
        z = ad.add(z, ad.scale(self._ffn(z, b, "ffn1", training, rng), 0.5))
        z = ad.add(z, self._mhsa(z, b, training, rng))
        z = ad.add(z, self._conv_module(z, b, training, rng))
        z = ad.add(z, ad.scale(self._ffn(z, b, "ffn2", training, rng), 0.5))
        return ad.layer_norm(z, self._p(f"{b}.final_ln.g"), self._p(f"{b}.final_ln.b"))

    def encode(self, x, training=False, rng=None):
        z = self.feature_encoder(x)
        for i in range(self.cfg.num_layers):
            z = self.conformer_block(z, i, training, rng)
        return z

    def param_count(self):
        return sum(t.data.size for n, t in self.params.items() if n.startswith(self.prefix + "."))
