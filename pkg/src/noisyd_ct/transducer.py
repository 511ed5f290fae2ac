"""Transducer decoder: LSTM prediction network, additive joint network,
auxiliary CTC projection head, and time-synchronous greedy decoding.

The vocabulary is character-level by default; a subword table can be
loaded from a ``token<TAB>id`` TSV with id 0 reserved for the blank.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad

BLANK_ID = 0
BLANK_TOKEN = "<blank>"


class VocabularyError(ValueError):
    pass


class Vocabulary:
    def __init__(self, symbols):
        """symbols: ordered non-blank units; blank is prepended at id 0."""
        self.symbols = [BLANK_TOKEN] + list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("duplicate symbols in vocabulary")
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    @property
    def blank_id(self):
        return BLANK_ID

    @classmethod
    def from_corpus(cls, transcripts):
        chars = sorted({c for t in transcripts for c in t})
        return cls(chars)

    def encode(self, text):
        try:
            return [self.index[c] for c in text]
        except KeyError as exc:
            raise VocabularyError(f"symbol {exc.args[0]!r} not in vocabulary")

    def decode(self, ids):
        return "".join(self.symbols[i] for i in ids if i != BLANK_ID)

    def save_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, s in enumerate(self.symbols):
                fh.write(f"{s}\t{i}\n")

    @classmethod
    def load_tsv(cls, path):
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.rstrip("\n"):
                    continue
                token, _, idx = line.rstrip("\n").partition("\t")
                pairs.append((int(idx), token))
        pairs.sort()
        ids = [i for i, _ in pairs]
        if ids != list(range(len(pairs))):
            raise VocabularyError("vocabulary ids must be dense in [0, |V|)")
        if pairs[0][1] != BLANK_TOKEN:
            raise VocabularyError(f"id 0 must be the blank token {BLANK_TOKEN!r}")
        return cls([t for _, t in pairs[1:]])

    def sha256(self):
        payload = "\n".join(self.symbols).encode("utf-8")
        return hashlib.sha256(payload).digest()


def init_decoder_params(vocab_size, d_model, rng, prefix="decoder"):
    def xavier(fan_in, fan_out, shape=None):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))

    d = d_model
    p = {}

    def add(name, value):
        p[f"{prefix}.{name}"] = ad.Tensor(value, requires_grad=True)

    add("embed", 0.1 * rng.standard_normal((vocab_size, d)))
    add("lstm.w_ih", xavier(d, 4 * d))
    add("lstm.w_hh", xavier(d, 4 * d))
    add("lstm.b", np.zeros(4 * d))
    add("joint.enc.w", xavier(d, d))
    add("joint.enc.b", np.zeros(d))
    add("joint.pred.w", xavier(d, d))
    add("joint.pred.b", np.zeros(d))
    add("joint.out.w", xavier(d, vocab_size))
    add("joint.out.b", np.zeros(vocab_size))
    add("ctc.w", xavier(d, vocab_size))
    add("ctc.b", np.zeros(vocab_size))
    return p


class TransducerDecoder:
    def __init__(self, vocab_size, d_model, params=None, rng=None, prefix="decoder"):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.prefix = prefix
        if params is None:
            params = init_decoder_params(vocab_size, d_model, rng if rng is not None else np.random.default_rng(0), prefix)
        self.params = params

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def predict_net(self, tokens):
        """(U+1) x d label representation; row 0 is the start state.

        Row u depends only on tokens[:u] (shift-causal); blanks rejected.
        """
        if any(t == BLANK_ID for t in tokens):
            raise VocabularyError("blank token in prediction-network input")
        d = self.d_model
        h = ad.Tensor(np.zeros((1, d)))
        c = ad.Tensor(np.zeros((1, d)))
        x = ad.Tensor(np.zeros((1, d)))  # start-of-sequence: all-zero embedding
        rows_out = []
        w_ih, w_hh, b = self._p("lstm.w_ih"), self._p("lstm.w_hh"), self._p("lstm.b")
        for step in range(len(tokens) + 1):
            h, c = ad.lstm_step(x, h, c, w_ih, w_hh, b)
            rows_out.append(ad.reshape(h, (d,)))
            if step < len(tokens):
                x = ad.rows(self._p("embed"), [tokens[step]])
        return ad.stack_rows(rows_out)

    def joint(self, h, hu):
        """t x (U+1) x |V| normalized log-probabilities."""
        if h.shape[-1] != self.d_model or hu.shape[-1] != self.d_model:
            raise ad.ShapeError(f"joint: widths {h.shape} / {hu.shape} != d_model {self.d_model}")
        enc = ad.add_bias(ad.matmul(h, self._p("joint.enc.w")), self._p("joint.enc.b"))
        pred = ad.add_bias(ad.matmul(hu, self._p("joint.pred.w")), self._p("joint.pred.b"))
        t, u = enc.shape[0], pred.shape[0]
        combined = ad.tanh(ad.outer_add(enc, pred))
        flat = ad.reshape(combined, (t * u, self.d_model))
        logits = ad.add_bias(ad.matmul(flat, self._p("joint.out.w")), self._p("joint.out.b"))
        return ad.log_softmax(ad.reshape(logits, (t, u, self.vocab_size)))

    def ctc_head(self, h):
        """t x |V| normalized log-probabilities from a linear projection."""
        logits = ad.add_bias(ad.matmul(h, self._p("ctc.w")), self._p("ctc.b"))
        return ad.log_softmax(logits)

    def greedy_decode(self, h, max_symbols_per_frame=10):
        """Standard greedy transducer search; returns non-blank token ids."""
        d = self.d_model
        he = ad.Tensor(np.zeros((1, d)))
        hc = ad.Tensor(np.zeros((1, d)))
        x = ad.Tensor(np.zeros((1, d)))
        w_ih, w_hh, b = self._p("lstm.w_ih"), self._p("lstm.w_hh"), self._p("lstm.b")
        he, hc = ad.lstm_step(x, he, hc, w_ih, w_hh, b)
        enc_all = ad.add_bias(ad.matmul(h, self._p("joint.enc.w")), self._p("joint.enc.b")).data
        pw, pb = self._p("joint.pred.w").data, self._p("joint.pred.b").data
        ow, ob = self._p("joint.out.w").data, self._p("joint.out.b").data
        out = []
        pred_vec = he.data[0] @ pw + pb
        for t in range(enc_all.shape[0]):
            for _ in range(max_symbols_per_frame):
                logits = np.tanh(enc_all[t] + pred_vec) @ ow + ob
                sym = int(np.argmax(logits))
                if sym == BLANK_ID:
                    break
                out.append(sym)
                x = ad.rows(self._p("embed"), [sym])
                he, hc = ad.lstm_step(x, he, hc, w_ih, w_hh, b)
                pred_vec = he.data[0] @ pw + pb
        return out

    def param_count(self):
        return sum(t.data.size for n, t in self.params.items() if n.startswith(self.prefix + "."))
