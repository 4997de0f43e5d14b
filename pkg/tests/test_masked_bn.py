import itertools

import numpy as np
import pytest
from _fixtures import small_hourglass
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprune import functional as F
from dualprune.nn import MaskedBNState, compute_mask, masked_bn_forward, ste_mask_grads
from dualprune.tensor import Tensor, grad

# dyadic values so that |gamma| - tau and the band edge are exact in binary
GAMMAS = [-2.5, -1.25, -0.5, -0.25, -0.125, 0.0, 0.125, 0.25, 0.5, 1.25, 2.5]
TAUS = [0.0, 0.125, 0.25]
BANDS = [0.0, 0.125, 1.0]


def ste_grid():
    return list(itertools.product(GAMMAS, TAUS, BANDS))


def expected_ste(gamma, tau, band):
    z = abs(gamma) - tau
    inside = abs(z) <= band
    return (float(np.sign(gamma)) if inside else 0.0), (-1.0 if inside else 0.0)


def test_grid_covers_required_regions():
    cases = ste_grid()
    zs = [(abs(g) - t, e, g) for g, t, e in cases]
    assert len(cases) >= 50
    assert any(abs(z) < e for z, e, _ in zs)
    assert any(abs(z) > e for z, e, _ in zs)
    assert any(abs(z) == e for z, e, _ in zs)
    assert any(g < 0 and abs(z) <= e for z, e, g in zs)


@pytest.mark.parametrize("gamma,tau,band", ste_grid())
def test_ste_grads_exact(gamma, tau, band):
    dg, dt = expected_ste(gamma, tau, band)
    g_t = Tensor(np.array([gamma]), requires_grad=True)
    tau_t = Tensor(np.array([tau]), requires_grad=True)
    m = F.channel_mask(g_t, tau_t, band)
    assert m.data[0] == (1.0 if abs(gamma) - tau >= 0 else 0.0)
    got_g, got_t = grad(F.sum(m), [g_t, tau_t])
    assert got_g[0] == dg
    assert got_t[0] == dt
    sg, st_ = ste_mask_grads(np.array([gamma]), tau, band)
    assert sg[0] == dg and st_[0] == dt


@pytest.mark.parametrize(
    "gamma,dg,dt",
    [(0.5, 1.0, -1.0), (2.5, 0.0, 0.0), (-0.5, -1.0, -1.0)],
)
def test_ste_worked_examples(gamma, dg, dt):
    sg, st_ = ste_mask_grads(np.array([gamma]), 0.1, 1.0)
    assert (sg[0], st_[0]) == (dg, dt)


def test_tau_gradient_sums_over_channels():
    gamma = Tensor(np.array([0.5, -0.3, 2.5, 0.05]), requires_grad=True)
    tau = Tensor(np.array([0.1]), requires_grad=True)
    (gt,) = grad(F.sum(F.channel_mask(gamma, tau, 1.0)), [tau])
    assert gt[0] == -3.0  # three channels in band, 2.5 is outside


def test_product_rule_through_effective_scale():
    gamma = Tensor(np.array([0.5, -0.3, 2.5, 0.05]), requires_grad=True)
    tau = Tensor(np.array([0.1]), requires_grad=True)
    m = F.channel_mask(gamma, tau, 1.0)
    g_gamma, g_tau = grad(F.sum(F.mul(gamma, m)), [gamma, tau])
    dm_dg, dm_dt = ste_mask_grads(gamma.data, 0.1, 1.0)
    np.testing.assert_array_equal(g_gamma, m.data + gamma.data * dm_dg)
    assert g_tau[0] == np.sum(gamma.data * dm_dt)


def test_compute_mask_examples():
    s = MaskedBNState.create(3, gamma=np.array([0.05, 0.2, -0.15]), tau=0.1, dtype=np.float64)
    np.testing.assert_array_equal(compute_mask(s)[0], [0, 1, 1])
    s = MaskedBNState.create(2, gamma=np.array([0.25, -0.25]), tau=0.25, dtype=np.float64)
    np.testing.assert_array_equal(compute_mask(s)[0], [1, 1])
    s = MaskedBNState.create(3, gamma=np.array([0.0, -1e-9, 3.0]), tau=0.0, dtype=np.float64)
    np.testing.assert_array_equal(compute_mask(s)[0], [1, 1, 1])


@settings(max_examples=100, deadline=None)
@given(
    gammas=st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8),
    tau=st.floats(0, 2, allow_nan=False),
)
def test_mask_is_pure_and_matches_rule(gammas, tau):
    s = MaskedBNState.create(len(gammas), gamma=np.array(gammas), tau=tau, dtype=np.float64)
    m1, z = compute_mask(s)
    m2, _ = compute_mask(s)
    assert np.array_equal(m1, m2)
    np.testing.assert_array_equal(m1, (np.abs(np.array(gammas)) - s.tau.data[0] >= 0).astype(float))
    np.testing.assert_array_equal(z, np.abs(np.array(gammas)) - s.tau.data[0])


@settings(max_examples=100, deadline=None)
@given(
    gammas=st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8),
    tau=st.floats(0, 2, allow_nan=False),
    band=st.floats(0, 2, allow_nan=False),
)
def test_ste_zero_outside_band(gammas, tau, band):
    g = np.array(gammas)
    dg, dt = ste_mask_grads(g, tau, band)
    outside = np.abs(np.abs(g) - tau) > band
    assert not dg[outside].any() and not dt[outside].any()


def _bn_input(rng, c=1):
    return Tensor(rng.normal(size=(2, c, 3, 3)))


def test_masked_channel_outputs_exact_zero(rng):
    s = MaskedBNState.create(1, gamma=np.array([0.05]), tau=0.1, dtype=np.float64)
    s.beta.data[:] = 0.7
    out = masked_bn_forward(_bn_input(rng), s, training=True)
    assert not out.data.any()


def test_all_ones_mask_equals_plain_bn_bitwise(rng):
    x = _bn_input(rng, 3)
    s = MaskedBNState.create(3, gamma=np.array([0.5, -0.7, 1.2]), tau=0.1, dtype=np.float64)
    s.beta.data[:] = [0.1, -0.2, 0.3]
    plain = MaskedBNState.create(3, gamma=s.gamma.data.copy(), masked=False, dtype=np.float64)
    plain.beta.data[:] = s.beta.data
    a = masked_bn_forward(x, s, training=True).data
    b = masked_bn_forward(x, plain, training=True).data
    assert np.array_equal(a, b)


def test_kept_channel_scales_normalized_activation(rng):
    x = _bn_input(rng)
    s = MaskedBNState.create(1, gamma=np.array([0.2]), tau=0.1, dtype=np.float64)
    out = masked_bn_forward(x, s, training=True).data
    mean, var = x.data.mean(), x.data.var()
    np.testing.assert_allclose(out, 0.2 * (x.data - mean) / np.sqrt(var + 1e-5), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), training=st.booleans())
def test_masked_channels_null_for_any_input(seed, training):
    rng = np.random.default_rng(seed)
    c = 5
    s = MaskedBNState.create(c, gamma=rng.uniform(-1, 1, size=c), tau=float(rng.uniform(0, 0.8)), dtype=np.float64)
    s.beta.data[:] = rng.normal(size=c)
    s.running_mean[:] = rng.normal(size=c)
    out = masked_bn_forward(Tensor(rng.normal(size=(3, c, 4, 4)) * 10), s, training=training).data
    off = compute_mask(s)[0] == 0
    assert not out[:, off].any()


def test_threshold_clamped_non_negative():
    s = MaskedBNState.create(2, tau=0.1)
    s.tau.data[:] = -0.3
    s.clamp_threshold()
    assert s.tau.data[0] == 0.0


def test_hourglass_thresholds_clamped_by_graph():
    g = small_hourglass()
    for n in g.bn_nodes(masked_only=True):
        n.bn.tau.data[:] = -1.0
    g.clamp_thresholds()
    assert all(n.bn.tau.data[0] == 0.0 for n in g.bn_nodes(masked_only=True))
