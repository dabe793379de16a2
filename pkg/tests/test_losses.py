import numpy as np
import pytest

from nho import autodiff as ad
from nho.losses import (
    LossReport,
    LossWeights,
    composite_loss,
    ergodic_loss,
    gradient_regularizer,
    hamiltonian_objective,
    lyapunov_drift,
    lyapunov_regularizer,
    regularized_terminal_loss,
    terminal_loss,
)
from nho.model import Psi, make_spec
from nho.network import (ControlBounds, NetworkParams, NetworkSpec, control_forward, default_spec,
                         init_network, input_jacobian)
from nho.problems import make_problem
from nho.simulator import InitialState, NoiseStream, TimeGrid, TrajectoryBatch, rollout


def fake_batch(S_T, P_T, jac=None, N=1, T=1.0):
    grid = TimeGrid.uniform(T, N)
    S_T, P_T = np.asarray(S_T, float), np.asarray(P_T, float)
    B, d = S_T.shape
    jac = [np.zeros((B, d, d))] * N if jac is None else jac
    return TrajectoryBatch(grid, np.arange(B), [S_T] * (N + 1), [P_T] * (N + 1), [None] * N,
                           [None] * N, jac, [None] * N, np.zeros((N, B, d)))


def small_psi(d, seed, width=3, stationary=False):
    return Psi(init_network(default_spec(d, d, output_map="box", hidden_widths=(width,),
                                         stationary=stationary), seed),
               init_network(default_spec(d, d, hidden_widths=(width,), stationary=stationary),
                            seed + 1))


# ---------------------------------------------------------------------------
# terminal loss


def test_terminal_loss_zero_when_condition_holds():
    spec = make_problem("p1", 3)
    S = np.random.default_rng(0).standard_normal((5, 3))
    assert float(terminal_loss(fake_batch(S, spec.terminal_grad(S)), spec)) == 0.0


def test_terminal_loss_examples():
    spec = make_problem("p2", 3)  # grad G(0) = 0
    S = np.zeros((1, 3))
    assert float(terminal_loss(fake_batch(S, [[1.0, 0, 0]]), spec)) == 1.0
    S2 = np.zeros((2, 3))
    P2 = np.array([[1.0, 0, 0], [1.0, 1.0, 1.0]])
    assert float(terminal_loss(fake_batch(S2, P2), spec)) == 2.0


# ---------------------------------------------------------------------------
# gradient regularizer


def test_grad_reg_zero_for_constant_field():
    spec = make_problem("p2", 2)
    b = fake_batch(np.zeros((4, 2)), np.zeros((4, 2)), N=10)
    assert float(gradient_regularizer(b, 1.0)) == 0.0


def test_grad_reg_linear_field_gives_frobenius_norm():
    d, N = 2, 25
    M = np.array([[1.0, -2.0], [0.5, 3.0]])
    xi = NetworkParams(NetworkSpec(d + 1, (), d), (np.vstack([np.zeros((1, d)), M.T]),), (np.zeros(d),))
    omega = init_network(default_spec(d, d, output_map="box", hidden_widths=(3,)), 0)
    spec = make_problem("p2", d, T=1.0)
    b = rollout(Psi(omega, xi), spec, TimeGrid.uniform(1.0, N), InitialState(np.zeros(d), 1.0), 7,
                NoiseStream(0))
    assert float(gradient_regularizer(b, 1.0)) == pytest.approx(np.sum(M * M), rel=1e-13)


def test_grad_reg_matches_independent_quadrature():
    spec = make_problem("p2", 3)
    psi = small_psi(3, 4, width=6)
    grid = TimeGrid.uniform(spec.T, 12)
    b = rollout(psi, spec, grid, InitialState(np.zeros(3), 0.8), 16, NoiseStream(2))
    S = b.array("S")
    ref = 0.0
    for i in range(grid.N):
        per_path = [np.sum(input_jacobian(psi.xi, grid.times[i], S[i, k]) ** 2) for k in range(16)]
        ref += grid.dt[i] * np.mean(per_path)
    assert float(gradient_regularizer(b, 0.3)) == pytest.approx(0.3 * ref, abs=1e-10)


def test_lambda_zero_is_exactly_terminal_loss():
    spec = make_problem("p1", 2)
    psi = small_psi(2, 1)
    b = rollout(psi, spec, TimeGrid.uniform(1.0, 6), InitialState(np.zeros(2), 0.5), 10, NoiseStream(3))
    a = regularized_terminal_loss(b, spec, 0.0)
    assert np.asarray(a).tobytes() == np.asarray(terminal_loss(b, spec)).tobytes()
    assert float(regularized_terminal_loss(b, spec, 0.5)) > float(a)


# ---------------------------------------------------------------------------
# ergodic loss


def _h_batch(values):
    """Batch whose recorded fields make the ergodic-ou Hamiltonian equal ``values``.

    With alpha = 0, p = 0, q = 0 the Hamiltonian is -s^2 (max form).
    """
    values = np.asarray(values, float)  # (N, B)
    N, B = values.shape
    S = [np.sqrt(-v).reshape(B, 1) for v in values]
    z = np.zeros((B, 1))
    grid = TimeGrid.uniform(float(N), N)
    return TrajectoryBatch(grid, np.arange(B), S + [S[-1]], [z] * (N + 1), [z] * N, [z] * N,
                           [np.zeros((B, 1, 1))] * N, [np.zeros((B, 1, 1))] * N, np.zeros((N, B, 1)))


def test_ergodic_loss_examples():
    spec = make_problem("ergodic-ou")
    psi = small_psi(1, 0, stationary=True)
    const = _h_batch(-np.full((6, 3), 2.0))
    assert float(ergodic_loss(const, psi, spec, burn_in=0.0)) == pytest.approx(0.0, abs=1e-15)
    two = _h_batch(-np.array([[1.0], [3.0]]))
    assert float(ergodic_loss(two, psi, spec, burn_in=0.0)) == pytest.approx(1.0, rel=1e-14)


def test_ergodic_loss_shift_invariant():
    psi = small_psi(1, 0, stationary=True)
    rng = np.random.default_rng(1)
    h = -rng.uniform(0.5, 2.0, size=(10, 4))
    base = make_problem("ergodic-ou")
    shifted = make_spec(**{**base.__dict__, "sense": "maximize",
                           "running": lambda t, s, a: base.running(t, s, a) + 7.5})
    a = float(ergodic_loss(_h_batch(h), psi, base, 0.2))
    b = float(ergodic_loss(_h_batch(h), psi, shifted, 0.2))
    assert b == pytest.approx(a, rel=1e-12)


def test_ergodic_burn_in_excludes_early_steps():
    psi = small_psi(1, 0, stationary=True)
    spec = make_problem("ergodic-ou")
    h = -np.vstack([np.full((2, 2), 9.0), np.full((8, 2), 1.0)])
    assert float(ergodic_loss(_h_batch(h), psi, spec, burn_in=0.2)) == pytest.approx(0.0, abs=1e-15)
    assert float(ergodic_loss(_h_batch(h), psi, spec, burn_in=0.0)) > 1.0


# ---------------------------------------------------------------------------
# Lyapunov regularizer


def _toy(drift, sigma, d):
    return make_spec(name="toy", d=d, d_M=d, m=d, T=1.0, drift=drift,
                     diffusion=lambda t, s, a: sigma * np.eye(d),
                     running=lambda t, s, a: ad.sum(a * 0.0, axis=-1),
                     terminal=lambda s: ad.sum(s * 0.0, axis=-1), terminal_grad=lambda s: s * 0.0,
                     bounds=ControlBounds.uniform(d, -1, 1), stationary=True)


def test_lyapunov_examples():
    s = np.random.default_rng(0).standard_normal((50, 3))
    a = np.zeros_like(s)
    contract = _toy(lambda t, s, a: -s, 0.0, 3)
    np.testing.assert_allclose(lyapunov_drift(contract, 0, s, a), -2 * np.sum(s * s, -1), rtol=1e-14)
    noise = _toy(lambda t, s, a: s * 0.0, 1.0, 3)
    np.testing.assert_array_equal(lyapunov_drift(noise, 0, s, a), np.full(50, 3.0))


def test_lyapunov_regularizer_is_time_average():
    spec = _toy(lambda t, s, a: -s, 0.0, 2)
    psi = small_psi(2, 0, stationary=True)
    grid = TimeGrid.uniform(2.0, 20)
    b = rollout(psi, spec, grid, InitialState(np.zeros(2), 1.0), 8, NoiseStream(0))
    S = b.array("S")
    ref = np.mean([np.mean(-2 * np.sum(S[i] ** 2, -1)) for i in range(4, 20)])
    assert float(lyapunov_regularizer(b, psi, spec, 0.2)) == pytest.approx(ref, rel=1e-12)


def test_lyapunov_matches_one_step_generator_estimate():
    spec = make_problem("ergodic-ou")
    dt, n = 1e-3, 1_000_000
    rng = np.random.default_rng(11)
    for s in (0.0, 0.7, -1.5):
        x = np.full((1, 1), s)
        step = s - s * dt + np.sqrt(dt) * rng.standard_normal(n)
        samples = (step ** 2 - s * s) / dt
        se = samples.std(ddof=1) / np.sqrt(n)
        lu = float(lyapunov_drift(spec, 0.0, x, np.zeros((1, 1)))[0])
        assert abs(samples.mean() - lu) <= 3 * se + s * s * dt


# ---------------------------------------------------------------------------
# differentiability


def _flat(psi):
    leaves, rebuild = ad.tree_flatten(psi)
    shapes = [np.shape(x) for x in leaves]
    sizes = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
    vec = np.concatenate([np.ravel(x) for x in leaves])

    def unflat(v):
        return rebuild([v[a:b].reshape(s) for a, b, s in zip(sizes[:-1], sizes[1:], shapes)])
    return vec, unflat


def _fd_check(objective, psi, coords=12, h=1e-6, seed=0):
    _, g = ad.value_and_grad(objective, psi)
    gv, _ = _flat(g)
    vec, unflat = _flat(psi)
    idx = np.random.default_rng(seed).choice(vec.size, size=min(coords, vec.size), replace=False)
    fd = []
    for i in idx:
        e = np.zeros_like(vec)
        e[i] = h
        fd.append((float(objective(unflat(vec + e))) - float(objective(unflat(vec - e)))) / (2 * h))
    fd = np.array(fd)
    assert np.linalg.norm(gv[idx] - fd) <= 1e-3 * np.linalg.norm(fd)


FH_CASES = [("terminal", lambda b, p, s: terminal_loss(b, s)),
            ("grad_reg", lambda b, p, s: gradient_regularizer(b, 0.7))]


@pytest.mark.parametrize("name,loss", FH_CASES, ids=[c[0] for c in FH_CASES])
def test_finite_horizon_losses_match_fd(name, loss):
    spec = make_problem("p2", 2)
    grid = TimeGrid.uniform(spec.T, 5)

    def objective(psi):
        b = rollout(psi, spec, grid, InitialState(np.zeros(2), 0.7), 8, NoiseStream(5))
        return loss(b, psi, spec)
    _fd_check(objective, small_psi(2, 3))


@pytest.mark.parametrize("which", ["ergodic", "lyapunov"])
def test_stationary_losses_match_fd(which):
    spec = make_problem("ergodic-ou", T=2.0)
    grid = TimeGrid.uniform(2.0, 10)

    def objective(psi):
        b = rollout(psi, spec, grid, InitialState(np.zeros(1), 1.0), 8, NoiseStream(6))
        if which == "ergodic":
            return ergodic_loss(b, psi, spec, 0.2)
        return lyapunov_regularizer(b, psi, spec, 0.2)
    _fd_check(objective, small_psi(1, 2, stationary=True))


def test_hamiltonian_objective_matches_fd_in_control_parameters():
    spec = make_problem("p2", 2)
    base = small_psi(2, 7)
    b = rollout(base, spec, TimeGrid.uniform(spec.T, 5), InitialState(np.zeros(2), 0.7), 8,
                NoiseStream(1))

    def objective(omega):
        return hamiltonian_objective(b, Psi(omega, base.xi), spec)
    _fd_check(objective, base.omega)


def _terminal_grad_xi(psi, spec, jacobian_path):
    grid = TimeGrid.uniform(spec.T, 5)

    def objective(xi):
        b = rollout(Psi(psi.omega, xi), spec, grid, InitialState(np.zeros(spec.d), 0.7), 16,
                    NoiseStream(4), jacobian_path=jacobian_path)
        return terminal_loss(b, spec)
    g = ad.grad(objective, psi.xi)
    return _flat(g)[0]


def test_gradient_flows_through_q_field():
    spec = make_problem("p2", 3)
    psi = small_psi(3, 9, width=5)
    full = _terminal_grad_xi(psi, spec, True)
    ablated = _terminal_grad_xi(psi, spec, False)
    assert np.linalg.norm(full - ablated) > 1e-6 * np.linalg.norm(full)


# ---------------------------------------------------------------------------
# composition and reporting


def test_composite_total_is_weighted_sum():
    spec = make_problem("p2", 2)
    psi = small_psi(2, 0)
    b = rollout(psi, spec, TimeGrid.uniform(spec.T, 6), InitialState(np.zeros(2), 0.5), 12,
                NoiseStream(0))
    w = LossWeights(lam=0.25, hamiltonian=0.5)
    total, parts = composite_loss(b, psi, spec, w)
    expected = float(parts["terminal"]) + 0.25 * float(parts["grad_reg"]) - 0.5 * float(parts["hamiltonian"])
    assert float(total) == pytest.approx(expected, rel=1e-14)
    assert float(parts["terminal"]) >= 0 and float(parts["grad_reg"]) >= 0
    only, p0 = composite_loss(b, psi, spec, LossWeights(hamiltonian=0.0))
    assert float(only) == float(terminal_loss(b, spec)) and p0["hamiltonian"] == 0.0


def test_ergodic_composite():
    spec = make_problem("ergodic-ou")
    psi = small_psi(1, 1, stationary=True)
    b = rollout(psi, spec, TimeGrid.uniform(spec.T, 40), InitialState(np.zeros(1), 1.0), 8,
                NoiseStream(0))
    w = LossWeights(mode="ergodic", lam_lyap=0.1, hamiltonian=0.0)
    total, parts = composite_loss(b, psi, spec, w)
    assert parts["terminal"] == 0.0 and float(parts["ergodic"]) >= 0
    assert float(total) == pytest.approx(float(parts["ergodic"]) + 0.1 * float(parts["lyapunov"]))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(mode="weird")
    with pytest.raises(ValueError):
        LossWeights(lam=-1.0)


def test_loss_report_round_trip():
    r = LossReport(3, 0.5, 0.1, -0.2, 0.0, 0.0, 0.4, 0.01, 0.0)
    line = r.to_json()
    assert "\n" not in line
    assert LossReport.from_json(line) == r


@pytest.mark.parametrize("adjoint", ["path", "field"])
def test_hamiltonian_objective_adjoint_choice(adjoint):
    # p1 in max form: H = alpha . p + tr(q) - |alpha|^2 / 2, summed by hand
    spec = make_problem("p1", 2)
    psi = small_psi(2, 3)
    grid = TimeGrid.uniform(spec.T, 4)
    b = rollout(psi, spec, grid, InitialState(np.zeros(2), 0.5), 6, NoiseStream(2))
    expected = 0.0
    for i in range(grid.N):
        s = np.asarray(ad.value_of(b.S[i]))
        a = np.asarray(control_forward(psi.omega, spec.bounds, grid.times[i], s))
        p = np.asarray(ad.value_of(b.P[i] if adjoint == "path" else b.phi[i]))
        q = np.asarray(ad.value_of(b.q[i]))
        h = np.sum(a * p, -1) + np.trace(q, axis1=-2, axis2=-1) - 0.5 * np.sum(a * a, -1)
        expected += grid.dt[i] * h.mean()
    got = float(ad.value_of(hamiltonian_objective(b, psi, spec, adjoint)))
    assert got == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        LossWeights(adjoint="both")
