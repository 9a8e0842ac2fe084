import math

import mpmath
import numpy as np
import pytest

from cd2pfed.distill import cyclic_distillation_grads, cyclic_distillation_loss, kl, total_loss
from cd2pfed.nn import softmax


def _mp_kl(p, q):
    return sum(mpmath.mpf(a) * (mpmath.log(mpmath.mpf(a)) - mpmath.log(mpmath.mpf(b))) for a, b in zip(p, q))


def test_kl_matches_high_precision():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(1, 5)))[0]
    q = softmax(rng.normal(size=(1, 5)))[0]
    assert kl(p, q) == pytest.approx(float(_mp_kl(p.tolist(), q.tolist())), rel=1e-12)


def test_cyclic_loss_is_symmetric_and_vanishes_on_agreement():
    rng = np.random.default_rng(1)
    a = softmax(rng.normal(size=(4, 3)))
    b = softmax(rng.normal(size=(4, 3)))
    assert cyclic_distillation_loss(a, b) == pytest.approx(cyclic_distillation_loss(b, a), abs=1e-15)
    assert cyclic_distillation_loss(a, a) == 0.0
    assert cyclic_distillation_loss(a, b) > 0


def test_kl_clamps_zero_probabilities():
    p = np.array([1.0, 0.0])
    q = np.array([0.0, 1.0])
    assert math.isfinite(kl(p, q)) and kl(p, q) == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_cd_gradients_with_frozen_targets_match_finite_differences():
    rng = np.random.default_rng(2)
    zl, zg = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    tl, tg = softmax(zl), softmax(zg)
    g_l, g_g = cyclic_distillation_grads(tl, tg)

    def f(zl_, zg_):
        return float(np.mean(0.5 * (kl(tl, softmax(zg_)) + kl(tg, softmax(zl_)))))

    h = 1e-6
    for z, g, which in ((zl, g_l, 0), (zg, g_g, 1)):
        num = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            up, dn = z.copy(), z.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, zg) if which == 0 else (zl, up)
            args_dn = (dn, zg) if which == 0 else (zl, dn)
            num[idx] = (f(*args_up) - f(*args_dn)) / (2 * h)
        np.testing.assert_allclose(g, num, atol=1e-9)


def test_total_loss_combines_ce_and_weighted_cd():
    rng = np.random.default_rng(3)
    z, zl, zg = (rng.normal(size=(5, 3)) for _ in range(3))
    y = np.array([0, 1, 2, 1, 0])
    res = total_loss(z, y, zl, zg, lam=2.0)
    assert res.total == pytest.approx(res.ce + 2.0 * res.cd, abs=1e-15)
    np.testing.assert_allclose(res.grad_private, 2.0 * cyclic_distillation_grads(softmax(zl), softmax(zg))[0])
    plain = total_loss(z, y, cd_enabled=False)
    assert plain.grad_private is None and plain.cd == 0.0 and plain.total == res.ce


def test_lambda_zero_leaves_only_ce():
    rng = np.random.default_rng(4)
    z, zl, zg = (rng.normal(size=(2, 3)) for _ in range(3))
    res = total_loss(z, np.array([0, 1]), zl, zg, lam=0.0)
    assert res.total == res.ce
    assert not res.grad_private.any() and not res.grad_shared.any()
    with pytest.raises(ValueError):
        total_loss(z, np.array([0, 1]), lam=-1.0)
