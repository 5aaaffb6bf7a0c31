import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lleaks import losses
from lleaks.losses import (
    DistillConfig,
    cross_entropy,
    distill_loss,
    distill_loss_batch,
    kl_divergence,
    kl_logit_grad,
    kl_logit_grad_closed_form,
    mi_softmax,
    softmax,
)

finite_logits = st.lists(
    st.floats(min_value=-30, max_value=30, allow_nan=False), min_size=2, max_size=12
).map(lambda v: np.asarray(v, dtype=float))


def hp_softmax(logits):
    # high-precision reference via mpmath
    import mpmath

    mpmath.mp.dps = 50
    exps = [mpmath.exp(mpmath.mpf(float(z))) for z in logits]
    total = sum(exps)
    return np.array([float(e / total) for e in exps])


def test_softmax_symmetry():
    assert softmax(np.array([0.0, 0.0])) == pytest.approx([0.5, 0.5], abs=1e-15)


def test_softmax_closed_form_value():
    got = softmax(np.array([1.0, 0.0]))
    assert got == pytest.approx(hp_softmax([1.0, 0.0]), abs=1e-14)
    # e/(e+1), 1/(e+1)
    assert got == pytest.approx([0.7310585786300049, 0.2689414213699951], abs=1e-12)


def test_softmax_overflow_safe():
    got = softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(got).all()
    assert got[0] == pytest.approx(1.0, abs=1e-12)
    assert got[1] == pytest.approx(0.0, abs=1e-12)


def test_softmax_shift_invariant():
    z = np.array([0.3, -1.2, 2.5])
    assert softmax(z) == pytest.approx(softmax(z + 123.456), abs=1e-12)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax(np.array([]))
    with pytest.raises(ValueError):
        softmax(np.array([np.nan, 1.0]))


def test_mi_softmax_t1_is_softmax_bitwise():
    z = np.array([2.0, 0.0, -1.3])
    assert np.array_equal(mi_softmax(z, 1.0), softmax(z))


def test_mi_softmax_huge_t_is_uniform():
    got = mi_softmax(np.array([2.0, 0.0]), 1e6)
    assert np.abs(got - 0.5).max() < 1e-5


def test_mi_softmax_small_t_is_argmax():
    got = mi_softmax(np.array([2.0, 0.0, 1.0]), 1e-3)
    assert got == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)


def test_mi_softmax_scale_equivalence():
    got = mi_softmax(np.array([3.0, 1.0, 0.0]), 2.0)
    want = hp_softmax([1.5, 0.5, 0.0])
    assert got == pytest.approx(want, abs=1e-14)


def test_mi_softmax_rejects_bad_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            mi_softmax(np.array([1.0, 2.0]), t)


@given(finite_logits, st.floats(min_value=0.05, max_value=1000.0))
@settings(max_examples=200, deadline=None)
def test_mi_softmax_simplex_and_argmax(z, t):
    p = mi_softmax(z, t)
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p >= 0).all()
    # argmax preserved whenever the scaled top-two gap is resolvable in float64
    top, second = np.sort(z)[-1], np.sort(z)[-2]
    if (top - second) / t > 1e-9:
        assert p.argmax() == z.argmax()


@given(finite_logits, st.floats(min_value=0.05, max_value=50.0), st.floats(min_value=1.1, max_value=10.0))
@settings(max_examples=200, deadline=None)
def test_mi_softmax_smoothing_monotone(z, t1, factor):
    if np.ptp(z) == 0:
        return
    t2 = t1 * factor
    assert mi_softmax(z, t2).max() <= mi_softmax(z, t1).max() + 1e-12


def test_cross_entropy_one_hot_zero():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0


def test_cross_entropy_uniform_ln10():
    assert cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10.0), abs=1e-12)


def test_cross_entropy_clamped():
    got = cross_entropy(np.array([1.0, 0.0]), 1)
    assert got == pytest.approx(-math.log(1e-12))
    assert math.isfinite(got)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(np.array([0.5, 0.5]), 2)


def test_kl_identical_zero():
    assert kl_divergence(np.array([0.5, 0.5]), np.array([0.5, 0.5])) == 0.0


def test_kl_point_mass_value():
    got = kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert got == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_divergence(np.array([1.0]), np.array([0.5, 0.5]))


@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_kl_nonnegative(k, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k))
    q = rng.dirichlet(np.ones(k))
    assert kl_divergence(p, q) >= 0.0
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        DistillConfig(alpha=0.0, beta=0.0)


def test_distill_identical_logits_zero_loss_zero_grad():
    z = np.array([1.0, -0.5, 0.25])
    loss, grad = distill_loss(z, z.copy(), None, DistillConfig(4.0, 1.0, 0.0))
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert grad == pytest.approx(np.zeros(3), abs=1e-15)


def test_distill_beta_only_is_cross_entropy():
    rng = np.random.default_rng(0)
    t, s = rng.normal(size=5), rng.normal(size=5)
    loss, _ = distill_loss(t, s, 2, DistillConfig(3.0, 0.0, 1.0))
    assert loss == pytest.approx(cross_entropy(softmax(s), 2), abs=1e-12)


def test_distill_label_absent_drops_ce_term():
    rng = np.random.default_rng(1)
    t, s = rng.normal(size=4), rng.normal(size=4)
    cfg = DistillConfig(2.0, 0.7, 0.3)
    loss_no_label, grad_no_label = distill_loss(t, s, None, cfg)
    kl_only = DistillConfig(2.0, 0.7, 0.3)
    want = 0.7 * 4.0 * kl_divergence(mi_softmax(t, 2.0), mi_softmax(s, 2.0))
    assert loss_no_label == pytest.approx(want, abs=1e-12)


def _fd_grad(fn, x, h=1e-6):
    out = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def test_distill_grad_matches_finite_differences_100_draws():
    rng = np.random.default_rng(42)
    for _ in range(100):
        k = int(rng.integers(2, 9))
        t = rng.normal(size=k) * 2
        s = rng.normal(size=k) * 2
        cfg = DistillConfig(
            temperature=float(rng.uniform(0.5, 10.0)),
            alpha=float(rng.uniform(0.0, 2.0)),
            beta=float(rng.uniform(0.1, 2.0)),
        )
        label = int(rng.integers(0, k))
        _, grad = distill_loss(t, s, label, cfg)
        numeric = _fd_grad(lambda z: distill_loss(t, z, label, cfg)[0], s)
        scale = max(np.abs(numeric).max(), 1e-8)
        assert np.abs(grad - numeric).max() / scale < 1e-6


def test_distill_batch_consistent_with_single():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(4, 6))
    s = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    cfg = DistillConfig(4.0, 0.9, 0.1)
    loss_b, grad_b = distill_loss_batch(t, s, labels, cfg)
    singles = [distill_loss(t[i], s[i], int(labels[i]), cfg) for i in range(4)]
    assert loss_b == pytest.approx(np.mean([l for l, _ in singles]), abs=1e-12)
    want = np.stack([g for _, g in singles]) / 4
    assert grad_b == pytest.approx(want, abs=1e-12)


def test_closed_form_example_values():
    got = kl_logit_grad_closed_form(np.array([1.0, -1.0]), np.array([0.5, -0.5]), 10.0, 2)
    assert got == pytest.approx([0.0025, -0.0025], abs=1e-15)


def test_closed_form_identical_logits_zero():
    z = np.array([0.7, -0.2, -0.5])
    assert kl_logit_grad_closed_form(z, z.copy(), 5.0, 3) == pytest.approx(np.zeros(3))


def test_closed_form_rejects_nonzero_mean():
    with pytest.raises(ValueError, match="zero-mean"):
        kl_logit_grad_closed_form(np.array([1.0, 0.0]), np.array([0.5, -0.5]), 10.0, 2)


def test_closed_form_tracks_exact_grad_at_high_temperature():
    rng = np.random.default_rng(11)
    errors = {10.0: [], 50.0: [], 100.0: []}
    for _ in range(50):
        k = int(rng.integers(2, 10))
        z = rng.uniform(-1, 1, k)
        z -= z.mean()
        v = rng.uniform(-1, 1, k)
        v -= v.mean()
        for t in errors:
            exact = kl_logit_grad(z, v, t)
            approx = kl_logit_grad_closed_form(z, v, t, k)
            denom = np.linalg.norm(exact)
            if denom > 1e-13:
                errors[t].append(np.linalg.norm(approx - exact) / denom)
    means = {t: np.mean(v) for t, v in errors.items()}
    assert max(errors[50.0]) < 0.05
    assert means[10.0] > means[50.0] > means[100.0]
