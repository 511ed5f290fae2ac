"""Training losses: CTC, transducer (RNN-T), and their weighted composites.

Both dynamic programs run in log space with float64 accumulation and are
registered as single differentiable nodes whose backward rule is the
posterior-weighted occupancy.  ``*_bruteforce`` enumerate every alignment
and exist purely as independent oracles for small instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .transducer import BLANK_ID

NEG_INF = -np.inf


@dataclass
class LossWeights:
    mu: float = 0.3
    gamma: float = 1.0
    alpha: float = 0.3
    beta: float = 1.0

    def __post_init__(self):
        for name in ("mu", "gamma", "alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"loss weight {name}={v} outside [0, 1]")


def is_no_path(loss):
    """True for the distinguished no-alignment outcome of ctc_loss."""
    return bool(np.isinf(loss.data))


def _ctc_extended(target):
    ext = [BLANK_ID]
    for y in target:
        ext.append(y)
        ext.append(BLANK_ID)
    return np.asarray(ext, dtype=np.int64)


def ctc_loss(logprobs, target):
    """-log P(target | x) by the forward algorithm over blank-padded labels.

    ``logprobs``: (t, |V|) normalized log-probabilities (Tensor).  Targets
    too long for t yield a +inf "no-path" tensor rather than an error.
    """
    lp = logprobs.data
    T, V = lp.shape
    target = list(target)
    if any(not 0 < y < V for y in target):
        raise ValueError(f"ctc_loss: target symbols must be in [1, {V})")
    ext = _ctc_extended(target)
    S = len(ext)
    allow_skip = np.zeros(S, dtype=bool)
    allow_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        stay = alpha[t - 1]
        prev = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[2:] = alpha[t - 1, :-2]
        skip[~allow_skip] = NEG_INF
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev), skip) + lp[t, ext]
    log_z = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_z):
        return ad.Tensor(np.inf)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    fwd_skip = np.zeros(S, dtype=bool)
    fwd_skip[:-2] = allow_skip[2:]
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.concatenate((beta[t + 1, 1:], [NEG_INF]))
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[:-2] = beta[t + 1, 2:]
        skip[~fwd_skip] = NEG_INF
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt), skip) + lp[t, ext]

    # state posteriors; emission log-prob counted in both alpha and beta
    gamma = alpha + beta - lp[:, ext] - log_z
    grad = np.zeros_like(lp)
    with np.errstate(under="ignore"):
        occ = np.exp(gamma)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]

    def bwd(g):
        ad._accum(logprobs, float(g) * grad)

    return ad._make(np.asarray(-log_z), (logprobs,), bwd)


def ctc_loss_bruteforce(lp, target):
    """Enumerate all |V|^t frame paths and collapse; oracle for t<=4."""
    lp = np.asarray(lp, dtype=np.float64)
    T, V = lp.shape
    target = tuple(target)
    total = NEG_INF
    for path in product(range(V), repeat=T):
        collapsed = []
        prev = None
        for s in path:
            if s != prev and s != BLANK_ID:
                collapsed.append(s)
            prev = s
        if tuple(collapsed) == target:
            total = np.logaddexp(total, sum(lp[t, s] for t, s in enumerate(path)))
    return math.inf if total == NEG_INF else -float(total)


def rnnt_loss(lattice, target):
    """-log P(target | x) by forward-backward over the (time, label) grid.

    ``lattice``: (t, U+1, |V|) normalized log-probabilities (Tensor) whose
    u-th slice conditions on the first u target labels.
    """
    lp = lattice.data
    T, U1, V = lp.shape
    target = list(target)
    U = len(target)
    if U1 != U + 1:
        raise ad.ShapeError(f"rnnt_loss: lattice U-dimension {U1} != len(target)+1 = {U + 1}")
    if any(not 0 < y < V for y in target):
        raise ValueError(f"rnnt_loss: target symbols must be in [1, {V})")

    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(1, U + 1):
            alpha[t, u] = np.logaddexp(alpha[t, u], alpha[t, u - 1] + lp[t, u - 1, target[u - 1]])
        if t + 1 < T:
            alpha[t + 1] = alpha[t] + lp[t, :, BLANK_ID]
    log_z = alpha[T - 1, U] + lp[T - 1, U, BLANK_ID]

    beta = np.full((T, U + 1), NEG_INF)
    beta[T - 1, U] = lp[T - 1, U, BLANK_ID]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            acc = beta[t, u] if (t == T - 1 and u == U) else NEG_INF
            if t + 1 < T:
                acc = np.logaddexp(acc, lp[t, u, BLANK_ID] + beta[t + 1, u])
            if u < U:
                acc = np.logaddexp(acc, lp[t, u, target[u]] + beta[t, u + 1])
            beta[t, u] = acc

    grad = np.zeros_like(lp)
    with np.errstate(under="ignore"):
        for t in range(T):
            for u in range(U + 1):
                if t + 1 < T:
                    grad[t, u, BLANK_ID] -= math.exp(alpha[t, u] + lp[t, u, BLANK_ID] + beta[t + 1, u] - log_z)
                elif u == U:
                    grad[t, u, BLANK_ID] -= math.exp(alpha[t, u] + lp[t, u, BLANK_ID] - log_z)
                if u < U:
                    grad[t, u, target[u]] -= math.exp(alpha[t, u] + lp[t, u, target[u]] + beta[t, u + 1] - log_z)

    def bwd(g):
        ad._accum(lattice, float(g) * grad)

    return ad._make(np.asarray(-log_z), (lattice,), bwd)


def rnnt_loss_bruteforce(lp, target):
    """Enumerate every emit/blank interleaving; oracle for t<=4, U<=3."""
    lp = np.asarray(lp, dtype=np.float64)
    T, U1, V = lp.shape
    target = list(target)
    U = len(target)
    assert U1 == U + 1
    total = NEG_INF

    def walk(t, u, acc):
        nonlocal total
        if t == T - 1 and u == U:
            total = np.logaddexp(total, acc + lp[t, u, BLANK_ID])
        if t + 1 < T:
            walk(t + 1, u, acc + lp[t, u, BLANK_ID])
        if u < U:
            walk(t, u + 1, acc + lp[t, u, target[u]])

    walk(0, 0, 0.0)
    return -float(total)


def conformer_t_loss(ctc, rnnt, weights):
    """mu * L_CTC + gamma * L_RNNT."""
    return ad.add(ad.scale(ctc, weights.mu), ad.scale(rnnt, weights.gamma))


def noisyd_ct_loss(conformer_t, l_con, l_r, weights):
    """L_Conformer-T + alpha * L_CON + beta * L_R."""
    return ad.add(conformer_t, ad.add(ad.scale(l_con, weights.alpha), ad.scale(l_r, weights.beta)))
