"""Euler-Maruyama rollout of the extended state ``(S, p~)``.

Noise is counter-based: the Gaussian draw for ``(seed, stream, path, step,
component)`` is a pure function of those integers, so any split of the
batch into chunks or threads sees exactly the same increments.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .model import ProblemSpec, Psi, evaluate_fields
from .network import forward


class SimulationBlowUp(ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, path: int, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} on path {path} at step {step}")
        self.path = path
        self.step = step


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1:
            raise ValueError("N must be >= 1")
        if not T > 0:
            raise ValueError("T must be positive")
        return cls(np.linspace(0.0, T, int(N) + 1))

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)


def default_steps(T: float) -> int:
    """50 steps per unit time, 25 for T = 0.5."""
    return max(1, int(round(50 * T)))


# ---------------------------------------------------------------------------
# counter-based noise

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_INIT_STEP = 0xFFFF_FFFF  # reserved step index for initial-state draws


def _mix(z):
    """splitmix64 finalizer on a uint64 array."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _absorb(h, x):
    return _mix(h + _GOLDEN + np.asarray(x, dtype=np.uint64))


@dataclass(frozen=True)
class NoiseStream:
    """Standard normals keyed by ``(seed, stream, path, step, component)``.

    ``stream`` separates independent uses of the same seed (training
    iterations, evaluation); ``domain`` separates training from evaluation.
    """

    seed: int
    stream: int = 0
    domain: int = 0

    def __post_init__(self):
        for name in ("seed", "stream", "domain"):
            v = getattr(self, name)
            if int(v) < 0:
                raise ValueError(f"{name} must be non-negative")

    def with_stream(self, stream: int) -> "NoiseStream":
        return NoiseStream(self.seed, int(stream), self.domain)

    def _base(self):
        with np.errstate(over="ignore"):
            h = _mix(np.uint64(self.seed) ^ np.uint64(0x5851F42D4C957F2D))
            h = _absorb(h, self.domain)
            return _absorb(h, self.stream)

    def normals(self, paths, step: int, dim: int) -> np.ndarray:
        """Array ``(len(paths), dim)`` of independent standard normals."""
        paths = np.asarray(paths, dtype=np.uint64).reshape(-1, 1)
        comp = np.arange(dim, dtype=np.uint64).reshape(1, -1)
        with np.errstate(over="ignore"):
            h = _absorb(self._base(), np.uint64(step))
            h = _absorb(h, paths)
            h1 = _absorb(h, np.uint64(2) * comp)
            h2 = _absorb(h, np.uint64(2) * comp + np.uint64(1))
        # 53-bit uniforms; u1 in (0, 1] keeps the log finite
        u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sqrt_psd(c, tol: float = 1e-12) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"C must be square, got shape {c.shape}")
    if np.max(np.abs(c - c.T), initial=0.0) > tol:
        raise ValueError("C is not symmetric within 1e-12")
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sample_increments(C, grid: TimeGrid, batch: int | np.ndarray, noise: NoiseStream) -> np.ndarray:
    """Driver increments ``sqrt(dt_i) C(t_i)^(1/2) eps``, shape ``(N, B, d_M)``.

    ``C`` is a constant matrix or a callable of time.  ``batch`` is a path
    count or an explicit array of path indices.
    """
    paths = np.arange(batch) if np.ndim(batch) == 0 else np.asarray(batch)
    cfun = C if callable(C) else (lambda t, _c=np.asarray(C, dtype=float): _c)
    return np.stack([step_increments(cfun(grid.times[i]), grid.dt[i], paths, noise, i)
                     for i in range(grid.N)])


def step_increments(c, dt: float, paths, noise: NoiseStream, step: int) -> np.ndarray:
    """Increments of one step, ``(len(paths), d_M)``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    root = sqrt_psd(c)
    eps = noise.normals(paths, step, root.shape[0])
    return np.sqrt(dt) * (eps @ root)


# ---------------------------------------------------------------------------
# initial states


@dataclass(frozen=True)
class InitialState:
    """Point mass at ``center``, optionally blurred by an isotropic Gaussian.

    With ``law="scale-mixture"`` each path's Gaussian offset is shrunk by
    an independent uniform factor in (0, 1).  In high dimension this covers
    every radius up to about ``std * sqrt(d)`` instead of a thin shell.
    """

    center: np.ndarray
    std: float = 0.0
    law: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.law not in INITIAL_LAWS:
            raise ValueError(f"law must be one of {INITIAL_LAWS}, got {self.law!r}")

    def sample(self, paths, noise: NoiseStream) -> np.ndarray:
        paths = np.asarray(paths)
        d = self.center.size
        base = np.broadcast_to(self.center, (paths.size, d)).copy()
        if self.std == 0.0:
            return base
        z = noise.normals(paths, _INIT_STEP, d + 1)
        offset = z[:, :d]
        if self.law == "scale-mixture":
            offset = offset * ndtr(z[:, d:])
        return base + self.std * offset


INITIAL_LAWS = ("normal", "scale-mixture")


# ---------------------------------------------------------------------------
# rollout


@dataclass
class TrajectoryBatch:
    """Simulated paths; per-step lists hold arrays or traced tensors.

    ``S`` and ``P`` have ``N + 1`` entries of shape ``(B, d)``; ``alpha``,
    ``phi``, ``jac`` and ``q`` are evaluated at the left endpoint of each
    step, so they have ``N`` entries.
    """

    grid: TimeGrid
    paths: np.ndarray
    S: list
    P: list
    alpha: list
    phi: list
    jac: list
    q: list
    increments: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.paths.size)

    def array(self, name: str) -> np.ndarray:
        """Stack a recorded field as a plain array with time first."""
        return np.stack([np.asarray(ad.value_of(x)) for x in getattr(self, name)])


def _check_finite(x, paths, step, what):
    v = np.asarray(ad.value_of(x))
    bad = ~np.isfinite(v)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise SimulationBlowUp(int(paths[row]), step, what)


def rollout(psi: Psi, spec: ProblemSpec, grid: TimeGrid, s0_sampler: InitialState,
            batch, noise: NoiseStream, *, jacobian_path: bool = True,
            chunk_size: int | None = None, workers: int = 1) -> TrajectoryBatch:
    """Simulate ``batch`` paths (a count or an array of path indices).

    Traced parameters give a differentiable batch; they require a single
    chunk on the calling thread.  With plain arrays the batch may be split
    into chunks simulated by a thread pool; chunks are fixed by
    ``chunk_size`` alone, so the result does not depend on ``workers``.
    """
    paths = np.arange(batch) if np.ndim(batch) == 0 else np.asarray(batch)
    if paths.size < 1:
        raise ValueError("batch must contain at least one path")
    traced = any(isinstance(x, ad.Tensor) for x in ad.tree_flatten(psi)[0])
    if chunk_size is None or chunk_size >= paths.size:
        return _rollout_chunk(psi, spec, grid, s0_sampler, paths, noise, jacobian_path)
    if traced:
        raise ValueError("a traced rollout must run as one chunk; differentiate per chunk instead")
    chunks = [paths[i:i + chunk_size] for i in range(0, paths.size, chunk_size)]

    def run(idx):
        return _rollout_chunk(psi, spec, grid, s0_sampler, idx, noise, jacobian_path)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return concat_batches(parts)


def concat_batches(parts: list[TrajectoryBatch]) -> TrajectoryBatch:
    """Join untraced batches along the path axis, in the given order."""
    def cat(name):
        return [np.concatenate([np.asarray(getattr(p, name)[i]) for p in parts])
                for i in range(len(getattr(parts[0], name)))]
    return TrajectoryBatch(
        grid=parts[0].grid,
        paths=np.concatenate([p.paths for p in parts]),
        S=cat("S"), P=cat("P"), alpha=cat("alpha"), phi=cat("phi"), jac=cat("jac"), q=cat("q"),
        increments=np.concatenate([p.increments for p in parts], axis=1),
    )


def _rollout_chunk(psi, spec, grid, s0_sampler, paths, noise, jacobian_path):
    if s0_sampler.center.size != spec.d:
        raise ValueError(f"initial state has dimension {s0_sampler.center.size}, expected {spec.d}")
    dM = sample_increments(spec.C, grid, paths, noise)
    s = s0_sampler.sample(paths, noise)
    n, d, dm = paths.size, spec.d, spec.d_M
    S, P, A, PHI, JAC, Q = [s], [], [], [], [], []
    p = None
    for i in range(grid.N):
        t, dt = grid.times[i], grid.dt[i]
        fv = evaluate_fields(psi, spec, t, s, jacobian_path)
        if i == 0:
            p = fv.phi
            P.append(p)
        _check_finite(fv.alpha, paths, i, "control")
        _check_finite(fv.phi, paths, i, "decoupling field")
        sig_dm = ad.reshape(ad.matmul(fv.sigma, ad.reshape(dM[i], (n, dm, 1))), (n, d))
        q_dm = ad.reshape(ad.matmul(fv.q, ad.reshape(dM[i], (n, dm, 1))), (n, d))
        s = s + fv.mu * dt + sig_dm
        p = p - fv.grad_h * dt + q_dm
        _check_finite(s, paths, i + 1, "state")
        _check_finite(p, paths, i + 1, "adjoint")
        S.append(s)
        P.append(p)
        A.append(fv.alpha)
        PHI.append(fv.phi)
        JAC.append(fv.jac)
        Q.append(fv.q)
    return TrajectoryBatch(grid, paths, S, P, A, PHI, JAC, Q, dM)


def initial_adjoint(psi: Psi, batch: TrajectoryBatch):
    """Direct evaluation of ``Phi_xi(0, S_0)`` for comparison with ``P[0]``."""
    return forward(psi.xi, batch.grid.times[0], np.asarray(ad.value_of(batch.S[0])))


# ---------------------------------------------------------------------------
# state-only simulation (evaluation)


def simulate_controlled(omega, spec: ProblemSpec, grid: TimeGrid, s0_sampler: InitialState,
                        batch, noise: NoiseStream, control=None):
    """Forward state under the feedback ``alpha_omega`` (or a given ``control``).

    Returns ``(states, running)`` with ``states`` of shape ``(N + 1, B, d)``
    and ``running`` the left-endpoint sum of the running payoff per path,
    in max form.
    """
    from .network import control_forward

    paths = np.arange(batch) if np.ndim(batch) == 0 else np.asarray(batch)
    dM = sample_increments(spec.C, grid, paths, noise)
    s = s0_sampler.sample(paths, noise)
    n, d, dm = paths.size, spec.d, spec.d_M
    states = np.empty((grid.N + 1, n, d))
    states[0] = s
    run = np.zeros(n)
    for i in range(grid.N):
        t, dt = grid.times[i], grid.dt[i]
        a = control(t, s) if control is not None else control_forward(omega, spec.bounds, t, s)
        a = np.broadcast_to(np.asarray(a, dtype=float), (n, spec.m))
        sig = np.broadcast_to(np.asarray(spec.diffusion(t, s, a), dtype=float), (n, d, dm))
        run = run + dt * np.asarray(spec.running(t, s, a), dtype=float)
        s = s + np.asarray(spec.drift(t, s, a), dtype=float) * dt + np.einsum("bij,bj->bi", sig, dM[i])
        _check_finite(s, paths, i + 1, "state")
        states[i + 1] = s
    return states, run


def dump_trajectories(batch: TrajectoryBatch, out=None, delimiter: str = ",") -> str | None:
    """One row per (path, grid point): path, t, S_1..S_d, p_1..p_d."""
    S = batch.array("S")
    P = batch.array("P")
    d = S.shape[-1]
    header = ["path", "t"] + [f"S{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
    buf = out if out is not None else io.StringIO()
    buf.write(delimiter.join(header) + "\n")
    for b, path in enumerate(batch.paths):
        for k, t in enumerate(batch.grid.times):
            row = [str(int(path)), repr(float(t))]
            row += [repr(float(x)) for x in S[k, b]] + [repr(float(x)) for x in P[k, b]]
            buf.write(delimiter.join(row) + "\n")
    return buf.getvalue() if out is None else None
