"""Control-problem contract and the coefficients of the Hamiltonian system.

A :class:`ProblemSpec` is always stored in *maximization* form: problems
stated as minimizations are converted by :func:`make_spec`, which negates
the payoffs and their gradients and remembers the sign so values can be
reported in the original convention.

Shape conventions (batch axis first, ``B`` rows):

* ``s``: ``(B, d)``; ``alpha``: ``(B, m)``; ``p``: ``(B, d)``; ``q``: ``(B, d, d_M)``
* ``drift``: ``(B, d)``; ``diffusion``: ``(B, d, d_M)`` or a constant ``(d, d_M)``
* ``drift_jac[..., i, j] = d mu_i / d s_j``
* ``running``/``terminal``: ``(B,)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .network import ControlBounds, NetworkParams, control_forward, value_and_input_jacobian


def _identity_qv(d_M):
    eye = np.eye(d_M)
    return lambda t: eye


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    d_M: int
    m: int
    T: float
    drift: Callable
    diffusion: Callable
    running: Callable
    terminal: Callable
    terminal_grad: Callable
    bounds: ControlBounds
    drift_jac: Callable | None = None  # None: drift does not depend on s
    running_grad: Callable | None = None  # None: running payoff does not depend on s
    sigma_contraction: Callable | None = None  # None: diffusion does not depend on s
    qv: Callable | None = None  # t -> C(t), (d_M, d_M); None means identity
    sense: str = "maximize"  # as originally stated; callables are in max form
    stationary: bool = False
    s0: np.ndarray | None = None

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise ValueError(f"sense must be 'maximize' or 'minimize', got {self.sense!r}")
        if min(self.d, self.d_M, self.m) < 1:
            raise ValueError("dimensions must be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.bounds.dim != self.m:
            raise ValueError(f"control box has dimension {self.bounds.dim}, expected m={self.m}")
        if self.qv is None:
            object.__setattr__(self, "qv", _identity_qv(self.d_M))
        if self.s0 is not None:
            s0 = np.asarray(self.s0, dtype=float)
            if s0.shape != (self.d,):
                raise ValueError(f"s0 must have shape ({self.d},)")
            object.__setattr__(self, "s0", s0)

    @property
    def value_sign(self) -> float:
        """Multiply an internal (max-form) value by this to get the stated one."""
        return -1.0 if self.sense == "minimize" else 1.0

    def C(self, t) -> np.ndarray:
        c = np.asarray(self.qv(t), dtype=float)
        if c.shape != (self.d_M, self.d_M):
            raise ValueError(f"C(t) must be ({self.d_M}, {self.d_M}), got {c.shape}")
        return c


def _negated(fn):
    if fn is None:
        return None
    return lambda *args: -fn(*args)


def make_spec(*, sense: str = "maximize", **fields) -> ProblemSpec:
    """Build a :class:`ProblemSpec`, converting minimizations to max form."""
    if sense == "minimize":
        for key in ("running", "terminal", "terminal_grad", "running_grad"):
            if key in fields:
                fields[key] = _negated(fields[key])
    return ProblemSpec(sense=sense, **fields)


def check_qv(spec: ProblemSpec, times, tol: float = 1e-12) -> None:
    """Raise unless C(t) is symmetric PSD at every given time."""
    for t in np.atleast_1d(times):
        c = spec.C(t)
        if np.max(np.abs(c - c.T), initial=0.0) > tol:
            raise ValueError(f"C({t}) is not symmetric")
        if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
            raise ValueError(f"C({t}) is not positive semi-definite")


# ---------------------------------------------------------------------------
# Hamiltonian


def _as_batch(x, width):
    shape = np.shape(ad.value_of(x))
    if len(shape) == 1:
        return ad.reshape(x, (1, width)), True
    return x, False


def _check(name, x, shape):
    got = np.shape(ad.value_of(x))
    if got[-len(shape):] != shape:
        raise ValueError(f"{name}: expected trailing shape {shape}, got {got}")


def _trace_inner(a, b):
    """``Tr(a^T b)`` over the last two axes."""
    return ad.sum(a * b, axis=(-2, -1))


def hamiltonian(spec: ProblemSpec, t, s, alpha, p, q):
    """``mu^T p + Tr(sigma^T q) + f`` (batched over the leading axis)."""
    _check("s", s, (spec.d,))
    _check("alpha", alpha, (spec.m,))
    _check("p", p, (spec.d,))
    _check("q", q, (spec.d, spec.d_M))
    s, single = _as_batch(s, spec.d)
    if single:
        alpha = ad.reshape(alpha, (1, spec.m))
        p = ad.reshape(p, (1, spec.d))
        q = ad.reshape(q, (1, spec.d, spec.d_M))
    mu = spec.drift(t, s, alpha)
    sig = spec.diffusion(t, s, alpha)
    h = ad.sum(mu * p, axis=-1) + _trace_inner(sig, q) + spec.running(t, s, alpha)
    return ad.reshape(h, ()) if single else h


def grad_s_hamiltonian(spec: ProblemSpec, t, s, alpha, p, q):
    """``(grad_s mu)^T p + Tr((grad_s sigma)^T q) + grad_s f``."""
    _check("s", s, (spec.d,))
    _check("p", p, (spec.d,))
    _check("q", q, (spec.d, spec.d_M))
    s, single = _as_batch(s, spec.d)
    if single:
        alpha = ad.reshape(alpha, (1, spec.m))
        p = ad.reshape(p, (1, spec.d))
        q = ad.reshape(q, (1, spec.d, spec.d_M))
    n = np.shape(ad.value_of(s))[0]
    out = np.zeros((n, spec.d))
    if spec.drift_jac is not None:
        jac = spec.drift_jac(t, s, alpha)
        pj = ad.matmul(ad.reshape(p, (n, 1, spec.d)), jac)
        out = out + ad.reshape(pj, (n, spec.d))
    if spec.sigma_contraction is not None:
        out = out + spec.sigma_contraction(t, s, alpha, q)
    if spec.running_grad is not None:
        out = out + spec.running_grad(t, s, alpha)
    return ad.reshape(out, (spec.d,)) if single else out


# ---------------------------------------------------------------------------
# parameterized system


class Psi(NamedTuple):
    """Trainable pair: control network ``omega`` and decoupling field ``xi``."""

    omega: NetworkParams
    xi: NetworkParams


class FieldValues(NamedTuple):
    """Everything the dynamics need at one ``(t, s)`` batch."""

    alpha: object
    phi: object
    jac: object  # d Phi / d s, (B, d, d)
    sigma: object
    q: object
    mu: object
    grad_h: object


class NhoCoefficients(NamedTuple):
    b_s: object
    b_p: object
    sigma_block: object
    q_block: object

    @property
    def drift(self):
        return ad.concat([self.b_s, self.b_p], axis=-1)

    @property
    def diffusion(self):
        return ad.concat([_bcast_sigma(self.sigma_block, self.q_block), self.q_block], axis=-2)


def _bcast_sigma(sig, q):
    shape = np.shape(ad.value_of(q))
    if np.shape(ad.value_of(sig)) != shape:
        return ad.broadcast_to(sig, shape)
    return sig


def evaluate_fields(psi: Psi, spec: ProblemSpec, t, s, jacobian_path: bool = True) -> FieldValues:
    """Evaluate control, decoupling field, q-field and Hamiltonian gradient.

    With ``jacobian_path=False`` the Jacobian enters ``q`` as a constant, an
    ablation used to confirm that gradients flow through it.
    """
    alpha = control_forward(psi.omega, spec.bounds, t, s)
    phi, jac = value_and_input_jacobian(psi.xi, t, s)
    if not jacobian_path:
        jac = ad.stop_gradient(jac)
    sig = spec.diffusion(t, s, alpha)
    q = ad.matmul(jac, sig)
    mu = spec.drift(t, s, alpha)
    grad_h = grad_s_hamiltonian(spec, t, s, alpha, phi, q)
    return FieldValues(alpha, phi, jac, sig, q, mu, grad_h)


def q_field(xi: NetworkParams, omega: NetworkParams, spec: ProblemSpec, t, s):
    """``(grad_s Phi_xi) sigma(t, s, alpha_omega)``, shape ``(..., d, d_M)``."""
    s, single = _as_batch(s, spec.d)
    alpha = control_forward(omega, spec.bounds, t, s)
    jac = value_and_input_jacobian(xi, t, s)[1]
    q = ad.matmul(jac, spec.diffusion(t, s, alpha))
    return ad.reshape(q, (spec.d, spec.d_M)) if single else q


def nho_coefficients(psi: Psi, spec: ProblemSpec, t, s) -> NhoCoefficients:
    """Drift blocks ``(b_s, b_p)`` and diffusion blocks ``(sigma, q)`` at ``(t, s)``."""
    s, single = _as_batch(s, spec.d)
    fv = evaluate_fields(psi, spec, t, s)
    coeffs = NhoCoefficients(fv.mu, -fv.grad_h, _bcast_sigma(fv.sigma, fv.q), fv.q)
    if single:
        d, dm = spec.d, spec.d_M
        coeffs = NhoCoefficients(ad.reshape(coeffs.b_s, (d,)), ad.reshape(coeffs.b_p, (d,)),
                                 ad.reshape(coeffs.sigma_block, (d, dm)),
                                 ad.reshape(coeffs.q_block, (d, dm)))
    return coeffs


def diffusion_matrix(psi: Psi, spec: ProblemSpec, t, s) -> np.ndarray:
    """``D = Sigma C Sigma^T`` of the extended state, ``(..., 2d, 2d)``."""
    co = nho_coefficients(psi, spec, t, s)
    sig = np.asarray(ad.value_of(co.diffusion))
    return sig @ spec.C(t) @ np.swapaxes(sig, -1, -2)


class SmoothFunction(NamedTuple):
    """A C^2 function on the extended state with explicit derivatives."""

    value: Callable
    grad: Callable
    hess: Callable


def nho_apply(psi: Psi, spec: ProblemSpec, t: float, x, g: SmoothFunction) -> float:
    """Generator action ``grad g^T b + 0.5 Tr(D hess g)`` at ``x = (s, y)``.

    Coefficients are evaluated at the ``s`` part of ``x`` only.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * spec.d,):
        raise ValueError(f"x must have shape ({2 * spec.d},)")
    co = nho_coefficients(psi, spec, t, x[:spec.d])
    b = np.asarray(ad.value_of(co.drift))
    sig = np.asarray(ad.value_of(co.diffusion))
    dmat = sig @ spec.C(t) @ sig.T
    return float(np.asarray(g.grad(x)) @ b + 0.5 * np.trace(dmat @ np.asarray(g.hess(x))))
