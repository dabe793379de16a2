"""Property suite run by ``nho check``.

Each check is self-contained, seeded, and returns a :class:`CheckResult`
with the worst observed metric next to its tolerance.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import Psi, SmoothFunction, diffusion_matrix, nho_apply, nho_coefficients
from .network import ControlBounds, NetworkSpec, control_forward, default_spec, forward, init_network, input_jacobian
from .problems import BENCHMARKS, make_problem, p1_hjb_residual
from .simulator import InitialState, NoiseStream, TimeGrid, initial_adjoint, rollout, sample_increments
from .trainer import lr_schedule


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    metric: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.detail} ({self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return asdict(self)


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-12))


def _flatten(params):
    leaves, rebuild = ad.tree_flatten(params)
    shapes = [np.shape(x) for x in leaves]
    cuts = np.cumsum([0] + [int(np.prod(s)) for s in shapes])

    def unflat(v):
        return rebuild([v[a:b].reshape(s) for a, b, s in zip(cuts[:-1], cuts[1:], shapes)])
    return np.concatenate([np.ravel(x) for x in leaves]), unflat


def _random_instance(rng):
    d = int(rng.integers(1, 5))
    widths = tuple(int(w) for w in rng.integers(3, 9, size=int(rng.integers(1, 3))))
    spec = NetworkSpec(d + 1, widths, int(rng.integers(1, 4)))
    return d, init_network(spec, int(rng.integers(2 ** 31))), rng.uniform(), rng.standard_normal((3, d))


def _fd_full(f, vec, h):
    out = np.empty_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        out[i] = (f(vec + e) - f(vec - e)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# gradient integrity


def check_grad_fd(instances: int = 100, seed: int = 0, tol: float = 1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        _, p, t, s = _random_instance(rng)
        vec, unflat = _flatten(p)

        def loss(q):
            return ad.sum(ad.tanh(forward(q, t, s)))
        g = _flatten(ad.grad(loss, p))[0]
        fd = _fd_full(lambda v: float(loss(unflat(v))), vec, 1e-5)
        worst = max(worst, _rel(g, fd))
    return worst, tol, f"max rel. err {worst:.2e} over {instances} MLPs"


def check_jacobian_fd(instances: int = 100, seed: int = 1, tol: float = 1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d, p, t, s = _random_instance(rng)
        x = s[0]
        j = input_jacobian(p, t, x)
        fd = np.column_stack([(forward(p, t, x + 1e-5 * e) - forward(p, t, x - 1e-5 * e)) / 2e-5
                              for e in np.eye(d)])
        worst = max(worst, _rel(j, fd))
    return worst, tol, f"max rel. err {worst:.2e} over {instances} MLPs"


def check_second_order_fd(instances: int = 100, seed: int = 2, tol: float = 1e-3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        _, p, t, s = _random_instance(rng)
        vec, unflat = _flatten(p)

        def loss(q):
            return ad.sum(ad.sqnorm(input_jacobian(q, t, s), axis=(-2, -1)))
        g = _flatten(ad.grad(loss, p))[0]
        fd = _fd_full(lambda v: float(loss(unflat(v))), vec, 1e-5)
        worst = max(worst, _rel(g, fd))
    return worst, tol, f"max rel. err {worst:.2e} over {instances} MLPs"


# ---------------------------------------------------------------------------
# structure of the parameterized system


def _psi(d, seed, width=8):
    return Psi(init_network(default_spec(d, d, output_map="box", hidden_widths=(width,)), seed),
               init_network(default_spec(d, d, hidden_widths=(width,)), seed + 10_000))


def check_diffusion_rank(draws: int = 100, seed: int = 3, tol: float = 1e-8):
    """``D = Sigma C Sigma^T`` of the 2d extended state has rank at most ``d_M``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(draws):
        name = ("p1", "p2", "p3")[k % 3]
        d = int(rng.integers(1, 5))
        spec = make_problem(name, d)
        D = diffusion_matrix(_psi(d, k), spec, rng.uniform(0, spec.T), rng.standard_normal(d))
        sv = np.linalg.svd(D, compute_uv=False)
        worst = max(worst, float(sv[spec.d_M:].max() / sv[0]) if sv[0] > 0 else 0.0)
    return worst, tol, f"largest singular value beyond d_M, relative: {worst:.1e} over {draws} draws"


def check_generator(seed: int = 4, n: int = 1_000_000, h: float = 1e-4):
    """``nho_apply`` on a quadratic against a one-step Monte-Carlo generator estimate."""
    spec = make_problem("p2", 2)
    psi = _psi(2, seed)
    x = np.array([0.4, -0.3, 0.8, -1.1])
    co = nho_coefficients(psi, spec, 0.1, x[:2])
    b, sig = np.asarray(co.drift), np.asarray(co.diffusion)
    quad = SmoothFunction(lambda z: float(z @ z), lambda z: 2 * z, lambda z: 2 * np.eye(z.size))
    eps = np.random.default_rng(seed).standard_normal((n, sig.shape[1]))
    xn = x + b * h + np.sqrt(h) * eps @ sig.T
    samples = (np.sum(xn * xn, axis=1) - x @ x) / h
    se = samples.std(ddof=1) / np.sqrt(n)
    z = abs(nho_apply(psi, spec, 0.1, x, quad) - samples.mean()) / se
    return z, 3.0, f"|generator - MC| = {z:.2f} standard errors"


def check_initial_adjoint(seed: int = 5):
    worst = 0
    for k, name in enumerate(("p1", "p2", "p3")):
        spec = make_problem(name, 3)
        psi = _psi(3, seed + k)
        b = rollout(psi, spec, TimeGrid.uniform(spec.T, 4), InitialState(np.zeros(3), 0.5), 7,
                    NoiseStream(seed))
        same = np.asarray(b.P[0]).tobytes() == np.asarray(initial_adjoint(psi, b)).tobytes()
        worst += 0 if same else 1
    return float(worst), 0.0, "p~_0 equals Phi(0, S_0) bit for bit" if worst == 0 else \
        f"{worst} problems differ"


def check_increments(seed: int = 6, n: int = 1_000_000, dt: float = 0.01):
    worst = 0.0
    for C in (np.eye(2), np.diag([4.0, 1.0])):
        x = sample_increments(C, TimeGrid(np.array([0.0, dt])), n, NoiseStream(seed))[0]
        for i in range(2):
            for j in range(2):
                prod = x[:, i] * x[:, j]
                se = prod.std(ddof=1) / np.sqrt(n)
                worst = max(worst, abs(prod.mean() - C[i, j] * dt) / se)
    return worst, 3.0, f"max covariance deviation {worst:.2f} standard errors (C = I, diag(4,1))"


# ---------------------------------------------------------------------------
# problems and schedule


def check_spec_derivatives(seed: int = 7, tol: float = 1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6

    def fd(f, s):
        return np.stack([(np.asarray(f(s + h * e)) - np.asarray(f(s - h * e))) / (2 * h)
                         for e in np.eye(s.shape[-1])], axis=-1)

    for name in BENCHMARKS:
        d = 1 if name == "ergodic-ou" else 3
        spec = make_problem(name, d)
        s = rng.standard_normal((100, d)) * 1.5
        a = rng.uniform(spec.bounds.lower, spec.bounds.upper, size=(100, spec.m))
        pairs = [(spec.terminal_grad(s), fd(spec.terminal, s))]
        dmu = fd(lambda z: spec.drift(0.0, z, a), s)
        jac = np.zeros_like(dmu) if spec.drift_jac is None else np.broadcast_to(
            np.asarray(spec.drift_jac(0.0, s, a)), dmu.shape)
        pairs.append((jac, dmu))
        df = fd(lambda z: spec.running(0.0, z, a), s)
        pairs.append((np.zeros_like(df) if spec.running_grad is None
                      else spec.running_grad(0.0, s, a), df))
        for x, y in pairs:
            scale = max(1.0, float(np.max(np.abs(y))))
            worst = max(worst, float(np.max(np.abs(np.asarray(x) - y))) / scale)
    return worst, tol, f"max scaled derivative error {worst:.1e} over {len(BENCHMARKS)} benchmarks"


def check_hopf_cole(tol: float = 1e-3):
    worst = max(abs(p1_hjb_residual(t, s)) for t in np.linspace(0.05, 0.9, 6)
                for s in np.linspace(-3, 3, 13))
    return worst, tol, f"max HJB residual {worst:.1e} on a (t, s) grid, d = 1"


def check_control_box(seed: int = 8):
    b = ControlBounds([0.0, -5.0, -1.0], [5.0, 5.0, 0.5])
    omega = init_network(default_spec(4, 3, output_map="box"), seed)
    s = np.random.default_rng(seed).standard_normal((10_000, 4)) * 10
    bad = int(np.sum(~b.contains(control_forward(omega, b, 0.5, s))))
    return float(bad), 0.0, f"{bad} of 10000 controls outside the box"


def check_schedule():
    k = np.arange(1_000_001)
    g = 1.0 / (1.0 + k / 100.0)
    assert lr_schedule(100, 1.0, 100) == g[100]
    s, sq = np.cumsum(g), np.cumsum(g * g)
    growth = float(s[-1] - s[100_000])
    ok = growth > 200 and sq[-1] < 200
    return (0.0 if ok else 1.0), 0.0, f"last-decade sum growth {growth:.0f}, sum of squares {sq[-1]:.1f}"


@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable
    group: str

    def run(self) -> CheckResult:
        t0 = time.perf_counter()
        try:
            metric, tol, detail = self.fn()
            passed = bool(metric <= tol)
        except Exception as exc:  # a crashing check is a failing check
            metric, tol, detail, passed = float("nan"), float("nan"), f"error: {exc}", False
        return CheckResult(self.name, passed, float(metric), float(tol), detail,
                           time.perf_counter() - t0)


CHECKS = (
    Check("autodiff.grad", check_grad_fd, "gradient"),
    Check("autodiff.jacobian", check_jacobian_fd, "gradient"),
    Check("autodiff.second-order", check_second_order_fd, "gradient"),
    Check("model.diffusion-rank", check_diffusion_rank, "structure"),
    Check("model.generator", check_generator, "structure"),
    Check("simulator.initial-adjoint", check_initial_adjoint, "structure"),
    Check("simulator.increments", check_increments, "simulator"),
    Check("problems.derivatives", check_spec_derivatives, "problems"),
    Check("problems.hopf-cole", check_hopf_cole, "problems"),
    Check("network.control-box", check_control_box, "network"),
    Check("trainer.schedule", check_schedule, "trainer"),
)


def run_checks(name_filter: str | None = None, report: Callable[[str], None] | None = None):
    """Run every check whose name or group contains ``name_filter``."""
    selected = [c for c in CHECKS
                if name_filter is None or name_filter in c.name or name_filter == c.group]
    if not selected:
        raise ValueError(f"no check matches {name_filter!r}")
    results = []
    for c in selected:
        r = c.run()
        results.append(r)
        if report is not None:
            report(r.line())
    return results
