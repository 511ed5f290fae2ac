"""DP losses against exhaustive alignment enumeration, plus composition rules."""

import numpy as np
import pytest

from noisyd_ct import autodiff as ad
from noisyd_ct.losses import (
    LossWeights,
    conformer_t_loss,
    ctc_loss,
    ctc_loss_bruteforce,
    is_no_path,
    noisyd_ct_loss,
    rnnt_loss,
    rnnt_loss_bruteforce,
)

rng = np.random.default_rng(7)


def random_logprobs(shape):
    return ad.log_softmax(ad.tensor(rng.standard_normal(shape), requires_grad=True))


def test_ctc_uniform_two_frame_worked_case():
    # uniform p=0.5 over {blank, a}, target "a": paths (a,-), (-,a), (a,a)
    lp = ad.tensor(np.log(np.full((2, 2), 0.5)))
    loss = ctc_loss(lp, [1])
    assert abs(float(loss.data) - (-np.log(0.75))) < 1e-12
    assert abs(float(loss.data) - 0.287682) < 1e-6


def test_ctc_target_longer_than_frames_is_no_path():
    lp = ad.tensor(np.log(np.full((2, 3), 1.0 / 3.0)))
    loss = ctc_loss(lp, [1, 2, 1])
    assert is_no_path(loss)


def test_ctc_repeat_needs_blank_separation():
    # "aa" needs a blank between repeats: impossible in 2 frames
    lp = ad.tensor(np.log(np.full((2, 2), 0.5)))
    assert is_no_path(ctc_loss(lp, [1, 1]))
    assert not is_no_path(ctc_loss(ad.tensor(np.log(np.full((3, 2), 0.5))), [1, 1]))


def test_ctc_empty_target():
    lp = ad.tensor(np.log(np.full((3, 2), 0.5)))
    loss = ctc_loss(lp, [])
    assert abs(float(loss.data) - 3 * np.log(2.0)) < 1e-12


def test_rnnt_single_alignment_worked_cases():
    # t=1, U=1, uniform |V|=2: the only alignment emits y then blank
    lp = ad.tensor(np.log(np.full((1, 2, 2), 0.5)))
    assert abs(float(rnnt_loss(lp, [1]).data) - np.log(4.0)) < 1e-12
    # t=2, U=0: blank twice
    lp = ad.tensor(np.log(np.full((2, 1, 2), 0.5)))
    assert abs(float(rnnt_loss(lp, []).data) - np.log(4.0)) < 1e-12


def test_ctc_dp_equals_bruteforce():
    for _ in range(200):
        t = int(rng.integers(1, 5))
        u = int(rng.integers(0, 4))
        lp = ad.log_softmax(ad.tensor(rng.standard_normal((t, 3))))
        target = list(rng.integers(1, 3, size=u))
        a = ctc_loss(lp, target)
        b = ctc_loss_bruteforce(lp.data, target)
        if is_no_path(a):
            assert np.isinf(b)
        else:
            assert abs(float(a.data) - b) < 1e-9


def test_rnnt_dp_equals_bruteforce():
    for _ in range(200):
        t = int(rng.integers(1, 5))
        u = int(rng.integers(0, 4))
        lp = ad.log_softmax(ad.tensor(rng.standard_normal((t, u + 1, 3))))
        target = list(rng.integers(1, 3, size=u))
        a = rnnt_loss(lp, target)
        b = rnnt_loss_bruteforce(lp.data, target)
        assert abs(float(a.data) - b) < 1e-9


def test_rnnt_lattice_dimension_mismatch():
    lp = ad.tensor(np.zeros((2, 2, 3)))
    with pytest.raises(ad.ShapeError):
        rnnt_loss(lp, [1, 2])  # needs U+1 == 3


def test_ctc_gradient_finite_differences():
    def f(x):
        return ctc_loss(ad.log_softmax(x), [1, 2, 1])

    for _ in range(20):
        x = ad.tensor(rng.standard_normal((3, 3)), requires_grad=True)
        assert ad.finite_diff_check(f, x, rng=rng) < 1e-6


def test_rnnt_gradient_finite_differences():
    def f(x):
        return rnnt_loss(ad.log_softmax(x), [1, 2])

    for _ in range(20):
        x = ad.tensor(rng.standard_normal((3, 3, 3)), requires_grad=True)
        assert ad.finite_diff_check(f, x, rng=rng) < 1e-5


def test_logit_shift_invariance():
    x = rng.standard_normal((3, 3))
    y = rng.standard_normal((3, 3, 3))
    for c in (0.0, 5.0, -17.0):
        a = ctc_loss(ad.log_softmax(ad.tensor(x + c)), [1, 2])
        b = ctc_loss(ad.log_softmax(ad.tensor(x)), [1, 2])
        assert abs(float(a.data) - float(b.data)) < 1e-9
        a = rnnt_loss(ad.log_softmax(ad.tensor(y + c)), [1, 2])
        b = rnnt_loss(ad.log_softmax(ad.tensor(y)), [1, 2])
        assert abs(float(a.data) - float(b.data)) < 1e-9


def test_weights_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        LossWeights(mu=1.5)
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


def test_composite_arithmetic():
    w = LossWeights(mu=0.3, gamma=1.0, alpha=0.3, beta=1.0)
    two = ad.tensor(np.array(2.0))
    one = ad.tensor(np.array(1.0))
    half = ad.tensor(np.array(0.5))
    ct = conformer_t_loss(two, one, w)
    assert abs(float(ct.data) - 1.6) < 1e-12
    total = noisyd_ct_loss(ct, one, half, w)
    assert abs(float(total.data) - 2.4) < 1e-12


def test_composite_degenerate_weights():
    rn = ad.tensor(np.array(1.25))
    ct = ad.tensor(np.array(2.0))
    w0 = LossWeights(mu=0.0, gamma=1.0)
    assert float(conformer_t_loss(ct, rn, w0).data) == float(rn.data)
    wz = LossWeights(alpha=0.0, beta=0.0)
    base = conformer_t_loss(ct, rn, wz)
    total = noisyd_ct_loss(base, rn, rn, wz)
    assert float(total.data) == float(base.data)


def test_composite_linearity_of_gradients():
    w = LossWeights(mu=0.3, gamma=1.0)
    c = ad.tensor(np.array(2.0), requires_grad=True)
    r = ad.tensor(np.array(1.0), requires_grad=True)
    ad.backward(conformer_t_loss(c, r, w))
    assert abs(c.grad - 0.3) < 1e-12
    assert abs(r.grad - 1.0) < 1e-12


def test_composite_reaches_both_parameter_sets():
    a = ad.tensor(rng.standard_normal((2, 2)), requires_grad=True)  # backbone-side
    b = ad.tensor(rng.standard_normal((2, 2)), requires_grad=True)  # noisyd-side
    w = LossWeights()
    base = ad.mean_square(ad.tanh(a))
    total = noisyd_ct_loss(base, ad.mean_square(ad.sigmoid(b)), ad.mean_square(b), w)
    ad.backward(total)
    assert a.grad is not None and np.any(a.grad != 0)
    assert b.grad is not None and np.any(b.grad != 0)
