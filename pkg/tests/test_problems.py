import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nho.problems import (
    double_well_grad,
    make_problem,
    p1_exact_control,
    p1_exact_value,
    p1_hjb_residual,
    p1_reference_control,
    p1_reference_value,
    smoothed_power_cost,
    solve_separable_hjb,
)


def test_p1_d50_statement():
    spec = make_problem("p1-terminal-log", 50)
    assert spec.T == 1.0 and spec.sense == "maximize"
    np.testing.assert_array_equal(spec.diffusion(0, np.zeros((1, 50)), np.zeros((1, 50))), np.eye(50))
    assert float(spec.terminal(np.zeros((1, 50)))[0]) == pytest.approx(np.log(0.5), abs=1e-15)
    np.testing.assert_array_equal(spec.C(0.3), np.eye(50))


def test_p3_d50_statement():
    spec = make_problem("p3", 50)
    assert spec.T == 1.0 and spec.sense == "minimize"
    np.testing.assert_array_equal(spec.s0, np.ones(50))
    np.testing.assert_allclose(spec.diffusion(0, np.zeros((1, 50)), np.zeros((1, 50))), 0.1 * np.eye(50))
    # max form: running = -kappa sum (a^2 + eps^2)^(3/4), terminal = -lam |s|^2
    a = np.full((1, 50), 0.5)
    assert float(spec.running(0, np.zeros((1, 50)), a)[0]) == pytest.approx(
        -0.1 * 50 * (0.25 + 1e-6) ** 0.75)
    assert float(spec.terminal(np.ones((1, 50)))[0]) == pytest.approx(-100 * 50)
    np.testing.assert_array_equal(spec.bounds.lower, np.zeros(50))


def test_p2_stable_equilibria_are_critical_points():
    for sign in (1.0, -1.0):
        np.testing.assert_array_equal(double_well_grad(sign * np.ones(7), 7), np.zeros(7))


def test_unknown_benchmark():
    with pytest.raises(ValueError, match="unknown benchmark"):
        make_problem("p4", 2)
    with pytest.raises(ValueError, match="unknown parameters"):
        make_problem("p3", 2, gamma=1.0)


def _fd(f, x, h=1e-6):
    cols = []
    for e in np.eye(x.shape[-1]):
        cols.append((np.asarray(f(x + h * e)) - np.asarray(f(x - h * e))) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("name", ["p1", "p2", "p3", "ergodic-ou"])
def test_analytic_derivatives_match_fd(name):
    d = 1 if name == "ergodic-ou" else 3
    spec = make_problem(name, d)
    rng = np.random.default_rng(7)
    s = rng.standard_normal((100, d)) * 1.5
    a = rng.uniform(spec.bounds.lower, spec.bounds.upper, size=(100, d))

    def rel(x, y):
        return np.max(np.abs(x - y)) / max(np.max(np.abs(y)), 1e-3)

    assert rel(np.asarray(spec.terminal_grad(s)), _fd(spec.terminal, s)) <= 1e-6
    dmu = _fd(lambda z: spec.drift(0.0, z, a), s)  # (100, d, d)
    jac = np.zeros_like(dmu) if spec.drift_jac is None else np.broadcast_to(
        np.asarray(spec.drift_jac(0.0, s, a)), dmu.shape)
    assert np.max(np.abs(jac - dmu)) <= 1e-6 * max(1.0, np.max(np.abs(dmu)))
    df = _fd(lambda z: spec.running(0.0, z, a), s)
    rg = np.zeros_like(df) if spec.running_grad is None else np.asarray(spec.running_grad(0.0, s, a))
    assert np.max(np.abs(rg - df)) <= 1e-6 * max(1.0, np.max(np.abs(df)))


def test_reference_at_horizon_is_terminal_payoff():
    s = np.array([0.3, -1.0])
    v, se = p1_reference_value(1.0, s, samples=10)
    assert v == pytest.approx(np.log(0.5 + 0.5 * s @ s), abs=1e-15) and se == 0.0


def test_hopf_cole_closed_form_against_quadrature():
    for s in (0.0, 0.7, -2.0):
        for t in (0.0, 0.5):
            q, _ = p1_reference_value(t, [s], method="quadrature")
            assert q == pytest.approx(float(p1_exact_value(t, np.array([s]))), abs=1e-10)
    q2, _ = p1_reference_value(0.2, [0.5, -1.0], method="quadrature")
    assert q2 == pytest.approx(float(p1_exact_value(0.2, np.array([0.5, -1.0]))), abs=1e-10)


def test_mc_reference_matches_quadrature_d1():
    v, se = p1_reference_value(0.0, [0.0], samples=1_000_000, seed=3)
    q, _ = p1_reference_value(0.0, [0.0], method="quadrature")
    assert abs(v - q) <= 3 * se


def test_hopf_cole_formula_solves_hjb_d1():
    worst = max(abs(p1_hjb_residual(t, s)) for t in np.linspace(0.05, 0.9, 6)
                for s in np.linspace(-3, 3, 13))
    assert worst <= 1e-3


def test_reference_control_symmetry_and_oracles():
    a0, se0 = p1_reference_control(0.0, np.zeros(3), samples=200_000, seed=1)
    assert np.all(np.abs(a0) <= 3 * se0 + 1e-12)
    s = np.array([0.8, -0.4, 1.5])
    ap, sep = p1_reference_control(0.3, s, samples=400_000, seed=2)
    am, sem = p1_reference_control(0.3, -s, samples=400_000, seed=5)
    assert np.all(np.abs(ap + am) <= 3 * np.hypot(sep, sem))
    assert np.all(np.abs(ap - p1_exact_control(0.3, s)) <= 3 * sep)


def test_reference_control_matches_fd_of_value_d1():
    for s in (-1.0, 0.4, 2.0):
        a, se = p1_reference_control(0.2, [s], samples=400_000, seed=9)
        h = 1e-4
        fd = (p1_reference_value(0.2, [s + h], method="quadrature")[0]
              - p1_reference_value(0.2, [s - h], method="quadrature")[0]) / (2 * h)
        assert abs(a[0] - fd) <= 3 * se[0] + 1e-6


def test_mc_reference_d10_within_error():
    v, se = p1_reference_value(0.0, np.zeros(10), samples=400_000, seed=4)
    assert abs(v - np.log(5.5)) <= 3 * se


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10))
def test_smoothed_cost_dominates(a):
    eps = 1e-3
    c = float(smoothed_power_cost(np.array(a), eps))
    assert c >= abs(a) ** 1.5 * (1 - 1e-12)


def test_smoothed_cost_gap_at_zero_and_smoothness():
    eps = 1e-3
    assert float(smoothed_power_cost(np.array(0.0), eps)) == pytest.approx(eps ** 1.5, rel=1e-12)
    h = 1e-7
    slope = (float(smoothed_power_cost(np.array(h), eps)) - float(smoothed_power_cost(np.array(-h), eps))) / (2 * h)
    assert abs(slope) < 1e-6


def test_separable_hjb_p2_consistent_with_its_feedback():
    sol = solve_separable_hjb("p2", 10, nt=500, nx=401, n_controls=201)
    rng = np.random.default_rng(0)
    n = 20_000
    x = np.zeros(n)
    cost = np.zeros(n)
    for k in range(len(sol.times) - 1):
        dt = sol.times[k + 1] - sol.times[k]
        a = sol.alpha(k, x)
        cost += 0.5 * a * a * dt
        x = x + sol.drift(x, a) * dt + sol.noise * np.sqrt(dt) * rng.standard_normal(n)
    cost += 0.25 * (x * x - 1) ** 2 / 10
    se = cost.std() / np.sqrt(n)
    assert abs(cost.mean() - sol.v(0, 0.0)) <= 3 * se + 0.01 * sol.v(0, 0.0)
