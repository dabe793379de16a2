"""Benchmark control problems and reference solutions.

``p1-terminal-log``
    ``dS = alpha dt + dZ``, payoff ``-1/2 |alpha|^2`` and terminal
    ``log(1/2 + 1/2 |s|^2)``, maximized over ``T = 1``.
``p2-double-well``
    ``dS = (-grad U + alpha) dt + sqrt(2) dZ``, cost ``1/2 |alpha|^2`` and
    terminal ``U``, ``U(s) = (1/d) sum_i (s_i^2 - 1)^2 / 4``, minimized over ``T = 0.5``.
``p3-liquidation``
    ``dS = -alpha dt + sigma dZ``, cost ``kappa sum_i (alpha_i^2 + eps^2)^(3/4)``
    and terminal ``lam |s|^2``, minimized over ``T = 1``.
``ergodic-ou``
    One-dimensional ``dS = (-s + alpha) dt + dZ`` with long-run average cost
    ``s^2 + alpha^2 / 2`` (stationary networks).

Reference values for ``p1`` come from the Hopf-Cole representation
``V(t, s) = log E[exp(G(s + W_{T-t}))]``.  ``p2`` and ``p3`` separate into
independent one-dimensional problems, for which :func:`solve_separable_hjb`
gives a finite-difference solution of the HJB equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from . import autodiff as ad
from .model import ProblemSpec, make_spec
from .network import ControlBounds

BENCHMARKS = ("p1-terminal-log", "p2-double-well", "p3-liquidation", "ergodic-ou")
ALIASES = {"p1": "p1-terminal-log", "p2": "p2-double-well", "p3": "p3-liquidation",
           "ergodic": "ergodic-ou", "ou": "ergodic-ou"}

DEFAULTS = {
    "p1-terminal-log": {"T": 1.0, "control_bound": 5.0},
    "p2-double-well": {"T": 0.5, "control_bound": 5.0, "noise": np.sqrt(2.0)},
    "p3-liquidation": {"T": 1.0, "kappa": 0.1, "lam": 100.0, "sigma": 0.1, "eps": 1e-3,
                       "control_bound": 5.0},
    "ergodic-ou": {"T": 10.0, "control_bound": 5.0},
}


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return key


def _const_diffusion(mat):
    return lambda t, s, a: mat


def _sq(x):
    return ad.sqnorm(x, axis=-1)


def _p1(d, T, control_bound):
    def terminal(s):
        return ad.log(0.5 + 0.5 * _sq(s))

    def terminal_grad(s):
        return 2.0 * s / ad.reshape(1.0 + _sq(s), (-1, 1))

    return make_spec(
        name="p1-terminal-log", d=d, d_M=d, m=d, T=T,
        drift=lambda t, s, a: a,
        diffusion=_const_diffusion(np.eye(d)),
        running=lambda t, s, a: -0.5 * _sq(a),
        terminal=terminal,
        terminal_grad=terminal_grad,
        bounds=ControlBounds.uniform(d, -control_bound, control_bound),
        sense="maximize",
        s0=np.zeros(d),
    )


def double_well_potential(s, d):
    """``U(s) = (1/d) sum_i (s_i^2 - 1)^2 / 4`` on the last axis."""
    w = s * s - 1.0
    return ad.sum(w * w, axis=-1) * (0.25 / d)


def double_well_grad(s, d):
    return (s * s * s - s) * (1.0 / d)


def _p2(d, T, control_bound, noise):
    def drift(t, s, a):
        return a - double_well_grad(s, d)

    def drift_jac(t, s, a):
        diag = (3.0 * s * s - 1.0) * (-1.0 / d)
        n = np.shape(ad.value_of(s))[0]
        return ad.reshape(diag, (n, d, 1)) * np.eye(d)

    return make_spec(
        name="p2-double-well", d=d, d_M=d, m=d, T=T,
        drift=drift,
        diffusion=_const_diffusion(noise * np.eye(d)),
        running=lambda t, s, a: 0.5 * _sq(a),
        terminal=lambda s: double_well_potential(s, d),
        terminal_grad=lambda s: double_well_grad(s, d),
        drift_jac=drift_jac,
        bounds=ControlBounds.uniform(d, -control_bound, control_bound),
        sense="minimize",
        s0=np.zeros(d),
    )


def smoothed_power_cost(a, eps):
    """``(a^2 + eps^2)^(3/4)``, a smooth stand-in for ``|a|^(3/2)``."""
    return ad.power(a * a + eps * eps, 0.75)


def _p3(d, T, kappa, lam, sigma, eps, control_bound):
    return make_spec(
        name="p3-liquidation", d=d, d_M=d, m=d, T=T,
        drift=lambda t, s, a: -a,
        diffusion=_const_diffusion(sigma * np.eye(d)),
        running=lambda t, s, a: kappa * ad.sum(smoothed_power_cost(a, eps), axis=-1),
        terminal=lambda s: lam * _sq(s),
        terminal_grad=lambda s: (2.0 * lam) * s,
        bounds=ControlBounds.uniform(d, 0.0, control_bound),
        sense="minimize",
        s0=np.ones(d),
    )


def _ergodic_ou(d, T, control_bound):
    if d != 1:
        raise ValueError("ergodic-ou is one-dimensional")
    return make_spec(
        name="ergodic-ou", d=1, d_M=1, m=1, T=T,
        drift=lambda t, s, a: a - s,
        diffusion=_const_diffusion(np.eye(1)),
        running=lambda t, s, a: ad.sum(s * s + 0.5 * (a * a), axis=-1),
        terminal=lambda s: ad.sum(s * 0.0, axis=-1),
        terminal_grad=lambda s: s * 0.0,
        drift_jac=lambda t, s, a: -np.ones((1, 1)),
        running_grad=lambda t, s, a: 2.0 * s,
        bounds=ControlBounds.uniform(1, -control_bound, control_bound),
        sense="minimize",
        stationary=True,
        s0=np.zeros(1),
    )


def make_problem(name: str, d: int | None = None, **params) -> ProblemSpec:
    """Construct a benchmark by id; unknown parameters are rejected."""
    key = canonical_name(name)
    opts = dict(DEFAULTS[key])
    unknown = set(params) - set(opts)
    if unknown:
        raise ValueError(f"unknown parameters for {key}: {sorted(unknown)}")
    opts.update({k: v for k, v in params.items() if v is not None})
    if key == "ergodic-ou":
        return _ergodic_ou(1 if d is None else int(d), **opts)
    if d is None or int(d) < 1:
        raise ValueError("dimension d must be >= 1")
    d = int(d)
    if key == "p1-terminal-log":
        return _p1(d, **opts)
    if key == "p2-double-well":
        return _p2(d, **opts)
    return _p3(d, **opts)


# ---------------------------------------------------------------------------
# p1 reference: Hopf-Cole


def _p1_G(x):
    return np.log(0.5 + 0.5 * np.sum(x * x, axis=-1))


def _p1_gradG(x):
    return 2.0 * x / (1.0 + np.sum(x * x, axis=-1, keepdims=True))


def _mc_chunks(samples, seed, d, chunk=200_000):
    rng = np.random.default_rng(seed)
    left = int(samples)
    while left > 0:
        n = min(chunk, left)
        yield rng.standard_normal((n, d))
        left -= n


def p1_reference_value(t: float, s, samples: int = 1_000_000, seed: int = 0,
                       T: float = 1.0, method: str = "mc") -> tuple[float, float]:
    """``V(t, s) = log E[exp(G(s + W_{T-t}))]`` and its standard error.

    ``method="mc"`` uses log-mean-exp over Gaussian samples (delta-method
    standard error); ``method="quadrature"`` uses a 64-point Gauss-Hermite
    product rule and is limited to ``d <= 2``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    tau = T - t
    if tau < 0:
        raise ValueError("t must not exceed T")
    if tau == 0:
        return float(_p1_G(s)), 0.0
    if method == "quadrature":
        return _p1_quadrature(s, tau, lambda x: np.exp(_p1_G(x))), 0.0
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    root = np.sqrt(tau)
    # two passes would cost twice the samples; shift by G(s) instead, which
    # keeps exp() in range for the payoffs used here
    shift = float(_p1_G(s))
    n = 0
    total = 0.0
    total_sq = 0.0
    for z in _mc_chunks(samples, seed, s.size):
        e = np.exp(_p1_G(s + root * z) - shift)
        total += e.sum()
        total_sq += (e * e).sum()
        n += e.size
    m = total / n
    var = max(total_sq / n - m * m, 0.0) * n / max(n - 1, 1)
    return float(shift + np.log(m)), float(np.sqrt(var / n) / m)


def _p1_quadrature(s, tau, integrand, points: int = 64):
    if s.size > 2:
        raise ValueError("quadrature reference is limited to d <= 2")
    x, w = np.polynomial.hermite_e.hermegauss(points)
    w = w / np.sqrt(2.0 * np.pi)
    root = np.sqrt(tau)
    if s.size == 1:
        vals = integrand(s + root * x[:, None])
        return float(np.log(np.sum(w * vals)))
    gx, gy = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    ww = np.outer(w, w).ravel()
    return float(np.log(np.sum(ww * integrand(s + root * pts))))


def p1_reference_control(t: float, s, samples: int = 1_000_000, seed: int = 0,
                         T: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """``alpha*(t, s) = grad_s V`` as ``E[e^G grad G] / E[e^G]`` with standard errors."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    tau = T - t
    if tau <= 0:
        raise ValueError("control reference needs t < T")
    root = np.sqrt(tau)
    d = s.size
    shift = float(_p1_G(s))
    n = 0
    sa = np.zeros(d)
    sb = 0.0
    saa = np.zeros(d)
    sbb = 0.0
    sab = np.zeros(d)
    for z in _mc_chunks(samples, seed, d):
        x = s + root * z
        b = np.exp(_p1_G(x) - shift)
        a = b[:, None] * _p1_gradG(x)
        sa += a.sum(axis=0)
        sb += b.sum()
        saa += (a * a).sum(axis=0)
        sbb += (b * b).sum()
        sab += (a * b[:, None]).sum(axis=0)
        n += b.size
    ma, mb = sa / n, sb / n
    r = ma / mb
    va = saa / n - ma * ma
    vb = sbb / n - mb * mb
    cab = sab / n - ma * mb
    var = np.maximum(va - 2 * r * cab + r * r * vb, 0.0) / (n * mb * mb)
    return r, np.sqrt(var)


def p1_exact_value(t, s, T: float = 1.0):
    """Closed form of the Hopf-Cole integral: ``exp(G)`` is quadratic in the state.

    ``E[1/2 + 1/2 |s + W|^2] = 1/2 (1 + |s|^2 + d (T - t))``.
    """
    s = np.asarray(s, dtype=float)
    d = s.shape[-1]
    return np.log(0.5 * (1.0 + np.sum(s * s, axis=-1) + d * (T - t)))


def p1_exact_control(t, s, T: float = 1.0):
    s = np.asarray(s, dtype=float)
    d = s.shape[-1]
    return 2.0 * s / (1.0 + np.sum(s * s, axis=-1, keepdims=True) + d * (T - t))


def p1_hjb_residual(t: float, s: float, h: float = 1e-3, T: float = 1.0) -> float:
    """Residual of ``V_t + V_ss / 2 + V_s^2 / 2 = 0`` in ``d = 1``.

    ``V`` comes from Gauss-Hermite quadrature of the Hopf-Cole integral and
    the derivatives from central differences, so this checks the
    representation itself rather than the closed form.
    """
    def v(tt, ss):
        return p1_reference_value(tt, [ss], T=T, method="quadrature")[0]

    vt = (v(t + h, s) - v(t - h, s)) / (2 * h)
    vs = (v(t, s + h) - v(t, s - h)) / (2 * h)
    vss = (v(t, s + h) - 2 * v(t, s) + v(t, s - h)) / (h * h)
    return float(vt + 0.5 * vss + 0.5 * vs * vs)


# ---------------------------------------------------------------------------
# separable problems: one-dimensional HJB by finite differences


@dataclass
class SeparableSolution:
    """Per-coordinate value ``v(t_k, x_j)`` and minimizing control (min form)."""

    times: np.ndarray
    x: np.ndarray
    value: np.ndarray  # (n_t, n_x)
    control: np.ndarray  # (n_t - 1, n_x): control used on [t_k, t_{k+1})
    drift: object
    noise: float

    def v(self, t_index: int, x) -> np.ndarray:
        return np.interp(x, self.x, self.value[t_index])

    def alpha(self, t_index: int, x) -> np.ndarray:
        return np.interp(x, self.x, self.control[min(t_index, len(self.control) - 1)])

    def total_value(self, s) -> float:
        """``V(0, s) = sum_i v(0, s_i)``."""
        return float(np.sum(self.v(0, np.asarray(s, dtype=float))))

    def mean_path(self, x0: float, paths: int = 20_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std of one coordinate under the finite-difference feedback."""
        rng = np.random.default_rng(seed)
        x = np.full(paths, float(x0))
        means, stds = [x.mean()], [0.0]
        for k in range(len(self.times) - 1):
            dt = self.times[k + 1] - self.times[k]
            a = self.alpha(k, x)
            x = x + self.drift(x, a) * dt + self.noise * np.sqrt(dt) * rng.standard_normal(paths)
            means.append(x.mean())
            stds.append(x.std())
        return np.asarray(means), np.asarray(stds)


def solve_separable_hjb(name: str, d: int, *, x_range=None, nx: int = 801,
                        nt: int = 2000, n_controls: int = 801, **params) -> SeparableSolution:
    """Finite-difference HJB for one coordinate of ``p2`` or ``p3`` (min form).

    Backward Euler in time with implicit diffusion and an explicit,
    upwinded Hamiltonian minimized over a control grid.
    """
    key = canonical_name(name)
    opts = dict(DEFAULTS[key])
    opts.update(params)
    T = opts["T"]
    if key == "p2-double-well":
        noise = float(opts["noise"])
        lo_a, hi_a = -opts["control_bound"], opts["control_bound"]

        def drift(x, a):
            return a - (x ** 3 - x) / d

        def running(a):
            return 0.5 * a * a

        def terminal(x):
            return 0.25 * (x * x - 1.0) ** 2 / d
        x_range = x_range or (-5.0, 5.0)
    elif key == "p3-liquidation":
        noise = float(opts["sigma"])
        lo_a, hi_a = 0.0, opts["control_bound"]
        kappa, lam, eps = opts["kappa"], opts["lam"], opts["eps"]

        def drift(x, a):
            return -a + 0.0 * x

        def running(a):
            return kappa * (a * a + eps * eps) ** 0.75

        def terminal(x):
            return lam * x * x
        x_range = x_range or (-1.0, 2.0)
    else:
        raise ValueError(f"{key} is not separable into one-dimensional problems")

    x = np.linspace(x_range[0], x_range[1], nx)
    dx = x[1] - x[0]
    times = np.linspace(0.0, T, nt + 1)
    dt = times[1] - times[0]
    controls = np.linspace(lo_a, hi_a, n_controls)
    b = drift(x[:, None], controls[None, :])  # (nx, na)
    cost = running(controls)[None, :]

    # implicit diffusion (I - dt sigma^2/2 Laplacian) on interior nodes
    diff = 0.5 * noise * noise * dt / (dx * dx)
    ab = np.zeros((3, nx))
    ab[0, 1:] = -diff
    ab[1, :] = 1.0 + 2.0 * diff
    ab[2, :-1] = -diff
    ab[1, 0] = ab[1, -1] = 1.0
    ab[0, 1] = 0.0
    ab[2, -2] = 0.0

    value = np.empty((nt + 1, nx))
    control = np.empty((nt, nx))
    v = terminal(x)
    value[nt] = v
    for k in range(nt - 1, -1, -1):
        fwd = np.empty(nx)
        bwd = np.empty(nx)
        fwd[:-1] = (v[1:] - v[:-1]) / dx
        fwd[-1] = fwd[-2]
        bwd[1:] = fwd[:-1]
        bwd[0] = bwd[1]
        vx = np.where(b > 0, fwd[:, None], bwd[:, None])
        ham = b * vx + cost
        j = np.argmin(ham, axis=1)
        h = ham[np.arange(nx), j]
        # boundary rows are identity rows: the end nodes get the explicit update only
        v = solve_banded((1, 1), ab, v + dt * h)
        value[k] = v
        control[k] = controls[j]
    return SeparableSolution(times, x, value, control, drift, noise)
