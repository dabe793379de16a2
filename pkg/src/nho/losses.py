"""Training objectives computed from a :class:`TrajectoryBatch`.

Every loss is a batch mean, so a batch split into chunks can be reduced
exactly by weighting each chunk's value with its share of the paths.
Time integrals use left-endpoint sums on the simulation grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .model import ProblemSpec, Psi, hamiltonian
from .network import control_forward
from .simulator import TrajectoryBatch


def terminal_loss(batch: TrajectoryBatch, spec: ProblemSpec):
    """Batch mean of ``|p~_T - grad G(S_T)|^2``."""
    r = batch.P[-1] - spec.terminal_grad(batch.S[-1])
    return ad.mean(ad.sqnorm(r, axis=-1))


def gradient_regularizer(batch: TrajectoryBatch, lam: float = 1.0):
    """``lam * sum_i dt_i * mean_b |grad_s Phi(t_i, S_i)|_F^2``."""
    dt = batch.grid.dt
    total = 0.0
    for i, jac in enumerate(batch.jac):
        total = total + dt[i] * ad.mean(ad.sqnorm(jac, axis=(-2, -1)))
    return lam * total


def path_hamiltonians(batch: TrajectoryBatch, psi: Psi, spec: ProblemSpec, steps=None,
                      detach_state: bool = False, adjoint: str = "field"):
    """``H_Psi = H(t_i, S_i, alpha_omega, Phi_xi, q_Psi)`` per step, each ``(B,)``.

    ``adjoint="path"`` uses the simulated adjoint ``p~_i`` in place of
    ``Phi_xi(t_i, S_i)``.  With ``detach_state`` the recorded ``S``, ``p``
    and ``q`` are constants, so only the control network receives gradient.
    """
    if adjoint not in ("field", "path"):
        raise ValueError(f"adjoint must be 'field' or 'path', got {adjoint!r}")
    steps = range(batch.grid.N) if steps is None else steps
    out = []
    for i in steps:
        t = batch.grid.times[i]
        p = batch.phi[i] if adjoint == "field" else batch.P[i]
        s, q = batch.S[i], batch.q[i]
        if detach_state:
            s, p, q = ad.stop_gradient(s), ad.stop_gradient(p), ad.stop_gradient(q)
            alpha = control_forward(psi.omega, spec.bounds, t, s)
        else:
            alpha = batch.alpha[i]
        out.append(hamiltonian(spec, t, s, alpha, p, q))
    return out


def hamiltonian_objective(batch: TrajectoryBatch, psi: Psi, spec: ProblemSpec,
                          adjoint: str = "path"):
    """Time integral and batch mean of the Hamiltonian, seen by the control only.

    Maximizing this pushes ``alpha_omega`` towards the pointwise maximizer of
    ``H`` at the simulated states and adjoints.  By default the simulated
    adjoint is used rather than ``Phi_xi``: the terminal loss pins ``p~``
    directly, while ``Phi_xi`` can carry an unpenalized offset ``c(t)``
    whenever the Hamiltonian's state gradient does not involve ``p``.
    ``adjoint="field"`` keeps the state feedback carried by ``Phi_xi``.
    """
    dt = batch.grid.dt
    total = 0.0
    for i, h in enumerate(path_hamiltonians(batch, psi, spec, detach_state=True, adjoint=adjoint)):
        total = total + dt[i] * ad.mean(h)
    return total


def burn_in_start(n_steps: int, burn_in: float) -> int:
    if not 0.0 <= burn_in < 1.0:
        raise ValueError("burn_in must lie in [0, 1)")
    return int(np.floor(burn_in * n_steps))


def ergodic_loss(batch: TrajectoryBatch, psi: Psi, spec: ProblemSpec, burn_in: float = 0.2):
    """Batch mean of the time variance of ``H`` along each path after burn-in."""
    k0 = burn_in_start(batch.grid.N, burn_in)
    dt = batch.grid.dt[k0:]
    w = dt / dt.sum()
    hs = path_hamiltonians(batch, psi, spec, steps=range(k0, batch.grid.N))
    mean = 0.0
    for wi, h in zip(w, hs):
        mean = mean + wi * h
    var = 0.0
    for wi, h in zip(w, hs):
        dev = h - mean
        var = var + wi * (dev * dev)
    return ad.mean(var)


def lyapunov_drift(spec: ProblemSpec, t, s, alpha):
    """``2 s^T mu + Tr(sigma C sigma^T)`` for ``U(s) = |s|^2``, shape ``(B,)``."""
    mu = spec.drift(t, s, alpha)
    sig = spec.diffusion(t, s, alpha)
    c = spec.C(t)
    sc = ad.matmul(sig, c)
    tr = ad.sum(sc * sig, axis=(-2, -1))
    n = np.shape(ad.value_of(s))[0]
    return 2.0 * ad.sum(s * mu, axis=-1) + ad.broadcast_to(tr, (n,))


def lyapunov_regularizer(batch: TrajectoryBatch, psi: Psi, spec: ProblemSpec,
                         burn_in: float = 0.2):
    """Time and batch average of the Lyapunov drift of ``|s|^2`` (unweighted)."""
    k0 = burn_in_start(batch.grid.N, burn_in)
    dt = batch.grid.dt[k0:]
    w = dt / dt.sum()
    total = 0.0
    for wi, i in zip(w, range(k0, batch.grid.N)):
        total = total + wi * ad.mean(lyapunov_drift(spec, batch.grid.times[i], batch.S[i],
                                                    batch.alpha[i]))
    return total


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class LossWeights:
    mode: str = "finite-horizon"
    lam: float = 0.0
    lam_lyap: float = 0.0
    hamiltonian: float = 1.0
    burn_in: float = 0.2
    adjoint: str = "path"

    def __post_init__(self):
        if self.adjoint not in ("path", "field"):
            raise ValueError(f"adjoint must be 'path' or 'field', got {self.adjoint!r}")
        if self.mode not in ("finite-horizon", "ergodic"):
            raise ValueError(f"mode must be 'finite-horizon' or 'ergodic', got {self.mode!r}")
        for name in ("lam", "lam_lyap", "hamiltonian"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    iteration: int
    terminal: float
    grad_reg: float
    hamiltonian: float
    ergodic: float
    lyapunov: float
    total: float
    lam: float
    lam_lyap: float

    FIELDS = ("iteration", "terminal", "grad_reg", "hamiltonian", "ergodic", "lyapunov", "total")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


def regularized_terminal_loss(batch: TrajectoryBatch, spec: ProblemSpec, lam: float):
    """``terminal + lam * grad_reg``; exactly the terminal loss when ``lam = 0``."""
    loss = terminal_loss(batch, spec)
    if lam == 0.0:
        return loss
    return loss + gradient_regularizer(batch, lam)


def composite_loss(batch: TrajectoryBatch, psi: Psi, spec: ProblemSpec, w: LossWeights):
    """Return ``(total, parts)``; ``parts`` holds the unweighted components.

    Finite horizon: ``terminal + lam grad_reg - w_H hamiltonian``.
    Ergodic: ``ergodic + lam_lyap lyapunov - w_H hamiltonian``.
    """
    parts = dict(terminal=0.0, grad_reg=0.0, hamiltonian=0.0, ergodic=0.0, lyapunov=0.0)
    if w.mode == "finite-horizon":
        parts["terminal"] = terminal_loss(batch, spec)
        parts["grad_reg"] = gradient_regularizer(batch, 1.0)
        total = parts["terminal"]
        if w.lam > 0:
            total = total + w.lam * parts["grad_reg"]
    else:
        parts["ergodic"] = ergodic_loss(batch, psi, spec, w.burn_in)
        parts["lyapunov"] = lyapunov_regularizer(batch, psi, spec, w.burn_in)
        total = parts["ergodic"]
        if w.lam_lyap > 0:
            total = total + w.lam_lyap * parts["lyapunov"]
    if w.hamiltonian > 0:
        parts["hamiltonian"] = hamiltonian_objective(batch, psi, spec, w.adjoint)
        total = total - w.hamiltonian * parts["hamiltonian"]
    return total, parts
