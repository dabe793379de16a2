import numpy as np
import pytest

from nho import autodiff as ad
from nho.evaluation import SliceRequest, estimate_value, expected_path, value_slice
from nho.model import Psi, make_spec
from nho.network import ControlBounds, default_spec, init_network
from nho.problems import make_problem


def toy(drift, sigma, running, terminal, d=1, T=1.0, sense="maximize"):
    return make_spec(name="toy", d=d, d_M=d, m=d, T=T, drift=drift,
                     diffusion=lambda t, s, a: sigma * np.eye(d), running=running,
                     terminal=terminal, terminal_grad=lambda s: s * 0.0,
                     bounds=ControlBounds.uniform(d, -1, 1), sense=sense)


def psi_for(d, seed=0):
    return Psi(init_network(default_spec(d, d, output_map="box", hidden_widths=(4,)), seed),
               init_network(default_spec(d, d, hidden_widths=(4,)), seed + 1))


def test_constant_payoff_has_no_variance():
    spec = toy(lambda t, s, a: a, 1.0, lambda t, s, a: ad.sum(s * 0.0, axis=-1),
               lambda s: ad.sum(s * 0.0, axis=-1) + 2.5, d=2)
    v, se = estimate_value(psi_for(2), spec, np.zeros(2), batch=500)
    assert v == 2.5 and se == 0.0


def test_deterministic_quadrature_by_hand():
    spec = toy(lambda t, s, a: s * 0.0 + 1.0, 0.0, lambda t, s, a: ad.sum(s, axis=-1),
               lambda s: ad.sum(s, axis=-1))
    v, se = estimate_value(None, spec, np.zeros(1), batch=1, N=4, control=lambda t, s: 0.0)
    # states 0, .25, .5, .75, 1; left sum .25 * (0 + .25 + .5 + .75) = .375; terminal 1
    assert v == pytest.approx(1.375, abs=1e-15) and se == 0.0
    flipped = toy(lambda t, s, a: s * 0.0 + 1.0, 0.0, lambda t, s, a: ad.sum(s, axis=-1),
                  lambda s: ad.sum(s, axis=-1), sense="minimize")
    assert estimate_value(None, flipped, np.zeros(1), batch=1, N=4,
                          control=lambda t, s: 0.0)[0] == pytest.approx(1.375, abs=1e-15)


def test_p1_zero_control_matches_direct_gaussian_mc():
    d = 3
    spec = make_problem("p1", d)
    s0 = np.array([0.5, -0.2, 1.0])
    v, se = estimate_value(None, spec, s0, batch=200_000, seed=3, control=lambda t, s: np.zeros(d))
    x = s0 + np.random.default_rng(8).standard_normal((200_000, d))
    g = np.log(0.5 + 0.5 * np.sum(x * x, axis=1))
    assert abs(v - g.mean()) <= 3 * np.hypot(se, g.std(ddof=1) / np.sqrt(g.size))


def test_standard_error_scales_with_batch():
    spec = make_problem("p2", 2)
    psi = psi_for(2, 3)
    ses = [estimate_value(psi, spec, np.zeros(2), batch=n, seed=1)[1] for n in (1_000, 10_000, 100_000)]
    for a, b in zip(ses, ses[1:]):
        assert np.sqrt(10) / 1.5 <= a / b <= np.sqrt(10) * 1.5


def test_estimates_are_seed_deterministic():
    spec = make_problem("p3", 2)
    psi = psi_for(2, 5)
    a = estimate_value(psi, spec, spec.s0, batch=300, seed=4)
    assert a == estimate_value(psi, spec, spec.s0, batch=300, seed=4)
    assert a != estimate_value(psi, spec, spec.s0, batch=300, seed=5)


def test_slice_flat_for_constant_terminal():
    spec = toy(lambda t, s, a: a, 1.0, lambda t, s, a: ad.sum(s * 0.0, axis=-1),
               lambda s: ad.sum(s * 0.0, axis=-1) - 1.0, d=2)
    table = value_slice(psi_for(2), spec, SliceRequest(axis=1, points=5), batch=50)
    np.testing.assert_array_equal(table.column("value"), np.full(5, -1.0))
    np.testing.assert_array_equal(table.column("s"), np.linspace(-3, 3, 5))
    assert table.to_text().splitlines()[0] == "s,value,value_se,alpha"


def test_slice_reference_columns():
    spec = make_problem("p1", 2)
    ref = (lambda s: float(np.sum(s)), lambda s: 2 * s)
    table = value_slice(psi_for(2), spec, SliceRequest(lo=-1, hi=1, points=3), ref, batch=20)
    assert table.columns[-2:] == ["value_ref", "alpha_ref"]
    np.testing.assert_array_equal(table.column("alpha_ref"), [-2.0, 0.0, 2.0])


def test_slice_request_validation():
    with pytest.raises(ValueError):
        SliceRequest(lo=1.0, hi=1.0)
    with pytest.raises(ValueError):
        SliceRequest(points=1)
    with pytest.raises(ValueError):
        SliceRequest(axis=3).states(2)


def test_expected_path_frozen_without_drift_or_noise():
    spec = toy(lambda t, s, a: s * 0.0, 0.0, lambda t, s, a: ad.sum(s * 0.0, axis=-1),
               lambda s: ad.sum(s * 0.0, axis=-1), d=2)
    table = expected_path(None, spec, 1, batch=10, s0=[0.3, -0.7], control=lambda t, s: 0.0)
    np.testing.assert_array_equal(table.column("mean"), np.full(51, -0.7))
    np.testing.assert_array_equal(table.column("std"), np.zeros(51))


def test_expected_path_martingale_with_noise():
    spec = toy(lambda t, s, a: s * 0.0, 1.0, lambda t, s, a: ad.sum(s * 0.0, axis=-1),
               lambda s: ad.sum(s * 0.0, axis=-1))
    n = 20_000
    table = expected_path(None, spec, 0, batch=n, s0=[1.0], control=lambda t, s: 0.0)
    assert table.column("std")[0] == 0.0
    mean, std = table.column("mean"), table.column("std")
    assert np.all(np.abs(mean[1:] - 1.0) <= 3 * std[1:] / np.sqrt(n))
    assert std[-1] == pytest.approx(1.0, rel=0.03)
