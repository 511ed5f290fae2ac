"""Tri-stage training orchestration, Adam optimizer, and checkpointing.

Stage 1 pre-trains the backbone + decoder on clean speech with the
CTC/transducer composite.  Stage 2 freezes them and trains only the
disentanglement module against the frozen clean branch, using the full
four-term loss.  Stage 3 freezes the disentanglement module and the
parallel clean branch and fine-tunes the backbone + decoder.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import read_wav
from .config import RunConfig
from .conformer import BackboneConfig, ConformerEncoder
from .features import NormStats, SpecAugmentPolicy, compute_norm_stats, global_mean_norm, log_mel, spec_augment
from .losses import LossWeights, conformer_t_loss, ctc_loss, is_no_path, noisyd_ct_loss, rnnt_loss
from .noisyd import NoisyDConfig, NoisyDModule, init_noisyd_params, l_con, l_r
from .transducer import TransducerDecoder, Vocabulary

CHECKPOINT_MAGIC = b"NDCT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoint serialization


@dataclass
class ModelCheckpoint:
    stage: int
    config_text: str
    vocab_hash: bytes
    norm_mean: np.ndarray | None
    tensors: dict  # name -> float32 ndarray
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt):
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", ckpt.version)
    body += struct.pack("<I", ckpt.stage)
    cfg_bytes = ckpt.config_text.encode("utf-8")
    body += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    body += struct.pack("<B", len(ckpt.vocab_hash)) + ckpt.vocab_hash
    if ckpt.norm_mean is None:
        body += struct.pack("<I", 0)
    else:
        mean = np.asarray(ckpt.norm_mean, dtype="<f4")
        body += struct.pack("<I", mean.size) + mean.tobytes()
    names = sorted(ckpt.tensors)
    body += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<I", dim)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint file")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    crc_stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch (file corrupt or truncated)")
    r = _Reader(data[:-4], path)
    r.take(4)
    version = r.u("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stage = r.u("<I")
    cfg_text = r.take(r.u("<I")).decode("utf-8")
    vocab_hash = bytes(r.take(r.u("<B")))
    mean_size = r.u("<I")
    norm_mean = None
    if mean_size:
        norm_mean = np.frombuffer(r.take(4 * mean_size), dtype="<f4").astype(np.float64)
    tensors = {}
    for _ in range(r.u("<I")):
        name = r.take(r.u("<H")).decode("utf-8")
        rank = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    return ModelCheckpoint(stage, cfg_text, vocab_hash, norm_mean, tensors, version)


# ---------------------------------------------------------------------------
# model assembly


class NoisyDCTModel:
    """Backbone encoder + transducer decoder, optional disentanglement
    module and optional frozen parallel clean branch."""

    def __init__(self, cfg, vocab, seed=0, with_noisyd=False, with_pretrained=False):
        self.cfg = cfg
        self.vocab = vocab
        self.bcfg = BackboneConfig(
            num_layers=cfg["encoder.layers"],
            d_model=cfg["encoder.d_model"],
            num_heads=cfg["encoder.heads"],
            ffn_dim=cfg["encoder.ffn_dim"],
            conv_kernel=cfg["encoder.conv_kernel"],
            dropout=cfg["encoder.dropout"],
            max_positions=cfg["encoder.max_positions"],
        )
        rng = np.random.default_rng([int(seed), 0x6D6F6465])
        self.params = {}
        self.encoder = ConformerEncoder(self.bcfg, rng=rng, prefix="encoder")
        self.params.update(self.encoder.params)
        self.decoder = TransducerDecoder(len(vocab), self.bcfg.d_model, rng=rng, prefix="decoder")
        self.params.update(self.decoder.params)
        self.ncfg = NoisyDConfig(self.bcfg.d_model, cfg["noisyd.hidden"])
        self.noisyd = None
        self.pretrained = None
        if with_noisyd:
            self.add_noisyd(rng)
        if with_pretrained:
            self.fork_pretrained()
        self.norm_stats = None

    def add_noisyd(self, rng):
        self.noisyd = NoisyDModule(self.ncfg, params=init_noisyd_params(self.ncfg, rng), prefix="noisyd")
        self.params.update(self.noisyd.params)

    def fork_pretrained(self):
        """Copy the backbone into a frozen parallel branch ("pretrained.*")."""
        pre = {}
        for name, t in self.encoder.params.items():
            pre["pretrained." + name.split(".", 1)[1]] = ad.Tensor(t.data.copy())
        self.pretrained = ConformerEncoder(self.bcfg, params=pre, prefix="pretrained")
        self.params.update(pre)

    def set_trainable(self, prefixes):
        """requires_grad=True exactly for tensors under the given prefixes."""
        for name, t in self.params.items():
            t.requires_grad = any(name.startswith(p) for p in prefixes)
            t.grad = None

    def state_tensors(self):
        return {name: t.data.astype("<f4") for name, t in sorted(self.params.items())}

    def load_state(self, tensors, allow_subset=False):
        missing = [n for n in self.params if n not in tensors]
        unexpected = [n for n in tensors if n not in self.params]
        if (missing and not allow_subset) or unexpected:
            raise CheckpointError(
                f"checkpoint/config mismatch: missing tensors {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, arr in tensors.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise CheckpointError(f"tensor {name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.astype(np.float64)

    def to_checkpoint(self, stage):
        return ModelCheckpoint(
            stage=stage,
            config_text=self.cfg.to_text(),
            vocab_hash=self.vocab.sha256(),
            norm_mean=None if self.norm_stats is None else self.norm_stats.mean,
            tensors=self.state_tensors(),
        )


def model_from_checkpoint(ckpt, vocab, with_noisyd=None, with_pretrained=False, inference_only=False):
    """Rebuild a model from a checkpoint.

    ``inference_only`` loads only the tensors used at decode time: the
    backbone, the decoder, and (for stage >= 2) the clean-part encoder;
    the noise-part encoder, reconstruction decoder, and parallel branch
    are neither instantiated nor loaded.
    """
    cfg = RunConfig.from_text(ckpt.config_text)
    if vocab.sha256() != ckpt.vocab_hash:
        raise CheckpointError("vocabulary hash does not match the checkpoint")
    has_noisyd = any(n.startswith("noisyd.") for n in ckpt.tensors)
    if with_noisyd is None:
        with_noisyd = has_noisyd
    model = NoisyDCTModel(cfg, vocab, with_noisyd=with_noisyd and not inference_only)
    if inference_only:
        wanted = {n: a for n, a in ckpt.tensors.items() if n.startswith(("encoder.", "decoder."))}
        if ckpt.stage >= 2:
            enc_c = {n: a for n, a in ckpt.tensors.items() if n.startswith("noisyd.encoder_c.")}
            if not enc_c:
                raise CheckpointError("stage >= 2 checkpoint is missing noisyd.encoder_c tensors")
            model.noisyd = NoisyDModule(model.ncfg, params={}, prefix="noisyd")
            for name, arr in enc_c.items():
                model.noisyd.params[name] = ad.Tensor(arr.astype(np.float64))
            model.params.update(model.noisyd.params)
            # drop everything outside encoder_c from the loadable set
            wanted.update(enc_c)
        model.load_state({n: a for n, a in wanted.items()}, allow_subset=False)
    else:
        if with_pretrained:
            model.fork_pretrained()
            if not any(n.startswith("pretrained.") for n in ckpt.tensors):
                # stage-2 checkpoints share storage: parallel branch == backbone
                for name in list(model.params):
                    if name.startswith("pretrained."):
                        src = "encoder." + name.split(".", 1)[1]
                        model.params[name].data = ckpt.tensors[src].astype(np.float64)
        tensors = dict(ckpt.tensors)
        if not with_noisyd:
            tensors = {n: a for n, a in tensors.items() if not n.startswith("noisyd.")}
        if not with_pretrained:
            tensors = {n: a for n, a in tensors.items() if not n.startswith("pretrained.")}
        missing_pre = [n for n in model.params if n.startswith("pretrained.") and n not in tensors]
        for name in missing_pre:
            tensors[name] = model.params[name].data.astype("<f4")
        model.load_state(tensors)
    if ckpt.norm_mean is not None:
        model.norm_stats = NormStats(ckpt.norm_mean)
    return model


# ---------------------------------------------------------------------------
# data pipeline


@dataclass
class PairedItem:
    id: str
    input_feats: np.ndarray  # (T, 80) normalized
    clean_feats: np.ndarray  # (T, 80) normalized
    tokens: list
    pair_kind: str  # "clean-clean" | "clean-noisy"


def featurize(path, norm_stats, cache=None):
    if cache is not None and path in cache:
        return cache[path]
    feats = log_mel(read_wav(path))
    if norm_stats is not None:
        feats = global_mean_norm(feats, norm_stats)
    out = feats.frames
    if cache is not None:
        cache[path] = out
    return out


def build_items(entries, vocab, norm_stats, cache=None):
    items = []
    for e in entries:
        tokens = vocab.encode(e.transcript)
        input_feats = featurize(e.audio_path, norm_stats, cache)
        if e.pairing is None:
            items.append(PairedItem(e.id, input_feats, input_feats, tokens, "clean-clean"))
        else:
            clean_feats = featurize(e.pairing["clean_path"], norm_stats, cache)
            if clean_feats.shape[0] != input_feats.shape[0]:
                raise TrainingError(f"{e.id}: clean/noisy frame counts differ (broken pairing)")
            items.append(PairedItem(e.id, input_feats, clean_feats, tokens, "clean-noisy"))
    return items


# ---------------------------------------------------------------------------
# optimizer and schedule


def learning_rate(peak, warmup, step):
    """peak * min(step/warmup, sqrt(warmup/step)); peak reached at warmup."""
    if warmup < 1:
        raise TrainingError(f"warmup_steps must be >= 1, got {warmup}")
    step = max(1, int(step))
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0
        self.rejected = 0

    def step(self, params, lr):
        """One update over all trainable tensors with populated grads.

        A non-finite gradient anywhere rejects the whole step (counter
        incremented) so a single bad batch cannot poison the parameters.
        """
        grads = {}
        for name, p in params.items():
            if p.requires_grad and p.grad is not None:
                if not np.isfinite(p.grad).all():
                    self.rejected += 1
                    for q in params.values():
                        q.grad = None
                    return False
                grads[name] = p.grad
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.grad = None
        return True


# ---------------------------------------------------------------------------
# loss evaluation


def item_losses(model, item, training, rng, use_noisyd, disentangler=None, weights=None):
    """Per-utterance loss tensors: (ctc, rnnt, l_con, l_r) — the MSE terms
    are None outside the disentanglement stages."""
    h_input = model.encoder.encode(item.input_feats, training=training, rng=rng)
    lcon = lr_ = None
    if use_noisyd:
        dis = disentangler if disentangler is not None else model.noisyd
        if isinstance(dis, NoisyDModule):
            hc, hn, recon = dis.forward(h_input)
        else:
            hc, recon = dis.encoder_c(h_input), None
        branch = model.pretrained if model.pretrained is not None else model.encoder
        h_clean = branch.encode(item.clean_feats, training=False, rng=None)
        lcon = l_con(h_clean, hc)
        lr_ = l_r(recon, h_input) if recon is not None else ad.Tensor(0.0)
        h_dec = hc
    else:
        h_dec = h_input
    hu = model.decoder.predict_net(item.tokens)
    lattice = model.decoder.joint(h_dec, hu)
    rnnt = rnnt_loss(lattice, item.tokens)
    ctc = ctc_loss(model.decoder.ctc_head(h_dec), item.tokens)
    return ctc, rnnt, lcon, lr_


def _mean(tensors):
    if not tensors:
        return ad.Tensor(0.0)
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(tensors))


def batch_loss(model, batch, weights, training, rng, use_noisyd, disentangler=None):
    """Mean-over-utterance composite loss plus logged components.

    No-path CTC outcomes are excluded from the CTC average and counted.
    """
    ctcs, rnnts, lcons, lrs = [], [], [], []
    no_path = 0
    for item in batch:
        ctc, rnnt, lcon, lr_ = item_losses(model, item, training, rng, use_noisyd, disentangler)
        if is_no_path(ctc):
            no_path += 1
        else:
            ctcs.append(ctc)
        rnnts.append(rnnt)
        if lcon is not None:
            lcons.append(lcon)
            lrs.append(lr_)
    ctc_m, rnnt_m = _mean(ctcs), _mean(rnnts)
    lcon_m, lr_m = _mean(lcons), _mean(lrs)
    total = conformer_t_loss(ctc_m, rnnt_m, weights)
    if use_noisyd:
        total = noisyd_ct_loss(total, lcon_m, lr_m, weights)
    components = {
        "ctc": float(ctc_m.data),
        "rnnt": float(rnnt_m.data),
        "l_con": float(lcon_m.data),
        "l_r": float(lr_m.data),
        "no_path": no_path,
    }
    return total, components


# ---------------------------------------------------------------------------
# stage plans and the training loop


@dataclass
class StagePlan:
    stage: int
    trainable: tuple
    use_noisyd: bool
    data_selector: str  # "clean-only" | "paired"


STAGE_PLANS = {
    1: StagePlan(1, ("encoder.", "decoder."), False, "clean-only"),
    2: StagePlan(2, ("noisyd.",), True, "paired"),
    3: StagePlan(3, ("encoder.", "decoder."), True, "paired"),
}


def loss_weights(cfg):
    return LossWeights(cfg["loss.mu"], cfg["loss.gamma"], cfg["loss.alpha"], cfg["loss.beta"])


def train_loop(model, items, plan, cfg, steps, seed, log_path=None, disentangler=None, specaugment=True):
    weights = loss_weights(cfg)
    batch_size = cfg["train.batch_size"]
    peak = cfg["schedule.peak_lr"]
    warmup = cfg["schedule.warmup_steps"]
    model.set_trainable(plan.trainable)
    opt = Adam()
    rng = np.random.default_rng([int(seed), plan.stage, 0x7472])
    policy = SpecAugmentPolicy(
        cfg["specaugment.time_masks"],
        cfg["specaugment.time_width"],
        cfg["specaugment.freq_masks"],
        cfg["specaugment.freq_width"],
    )
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    order = []
    try:
        for step in range(1, steps + 1):
            batch = []
            for _ in range(batch_size):
                if not order:
                    order = list(rng.permutation(len(items)))
                batch.append(items[order.pop()])
            if specaugment:
                batch = [
                    PairedItem(
                        it.id,
                        spec_augment(_as_features(it.input_feats), policy, rng).frames,
                        it.clean_feats,
                        it.tokens,
                        it.pair_kind,
                    )
                    for it in batch
                ]
            total, comps = batch_loss(model, batch, weights, True, rng, plan.use_noisyd, disentangler)
            ad.backward(total)
            lr = learning_rate(peak, warmup, step)
            opt.step(model.params, lr)
            if log:
                rec = {
                    "step": step,
                    "lr": lr,
                    "ctc": comps["ctc"],
                    "rnnt": comps["rnnt"],
                    "l_con": comps["l_con"],
                    "l_r": comps["l_r"],
                    "total": float(total.data),
                }
                log.write(json.dumps(rec) + "\n")
    finally:
        if log:
            log.close()
    return opt


def _as_features(frames):
    from .features import FeatureMatrix

    return FeatureMatrix(frames)


def stage1_pretrain(entries, cfg, steps, seed, vocab=None, log_path=None, specaugment=True,
                    norm_stats=None):
    """Clean-only pre-training of backbone + decoder with the CTC/RNN-T
    composite.

    The global feature mean is computed from `entries` and embedded in the
    model unless `norm_stats` is given; passing stats computed over the
    full (clean + noisy) corpus keeps later stages free of a normalization
    mismatch on noisy audio.
    """
    if any(e.pairing is not None for e in entries):
        raise TrainingError("stage 1 accepts clean-only manifests; found paired entries")
    if vocab is None:
        vocab = Vocabulary.from_corpus([e.transcript for e in entries])
    if norm_stats is None:
        raw = [log_mel(read_wav(e.audio_path)) for e in entries]
        norm_stats = compute_norm_stats(raw)
    model = NoisyDCTModel(cfg, vocab, seed=seed, with_noisyd=False)
    model.norm_stats = norm_stats
    cache = {}
    items = build_items(entries, vocab, norm_stats, cache)
    train_loop(model, items, STAGE_PLANS[1], cfg, steps, seed, log_path, specaugment=specaugment)
    return model


def stage2_noisyd_train(ckpt, entries, cfg, steps, seed, vocab, log_path=None, specaugment=True):
    """Disentanglement-only training against the frozen backbone.

    The parallel clean branch shares storage with the frozen backbone
    (identical weights), so no copy is made at this stage.
    """
    if ckpt.stage < 1:
        raise TrainingError("stage 2 requires a stage-1 checkpoint (--init)")
    model = model_from_checkpoint(ckpt, vocab, with_noisyd=False)
    rng = np.random.default_rng([int(seed), 0x6E64])
    model.add_noisyd(rng)
    items = build_items(entries, vocab, model.norm_stats, {})
    train_loop(model, items, STAGE_PLANS[2], cfg, steps, seed, log_path, specaugment=specaugment)
    return model


def stage3_finetune(ckpt, entries, cfg, steps, seed, vocab, log_path=None, disentangler=None, specaugment=True):
    """Backbone fine-tuning with the disentanglement module and the
    parallel branch frozen; the branch is forked since the backbone is
    now trainable."""
    if ckpt.stage < 2 and disentangler is None:
        raise TrainingError("stage 3 requires a stage-2 checkpoint (--init)")
    model = model_from_checkpoint(ckpt, vocab, with_noisyd=disentangler is None, with_pretrained=True)
    items = build_items(entries, vocab, model.norm_stats, {})
    train_loop(model, items, STAGE_PLANS[3], cfg, steps, seed, log_path, disentangler=disentangler, specaugment=specaugment)
    return model


# ---------------------------------------------------------------------------
# inference


def inference_pipeline(ckpt, vocab, feats):
    """encode -> clean-part encoder (stage >= 2) -> greedy decode."""
    model = model_from_checkpoint(ckpt, vocab, inference_only=True)
    return decode_features(model, feats)


def decode_features(model, feats):
    h = model.encoder.encode(feats, training=False)
    if model.noisyd is not None:
        h = model.noisyd.encoder_c(h)
    ids = model.decoder.greedy_decode(h)
    return model.vocab.decode(ids)
