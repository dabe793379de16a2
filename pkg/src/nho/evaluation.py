"""Monte-Carlo evaluation of a trained control."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ProblemSpec, Psi
from .network import control_forward
from .simulator import InitialState, NoiseStream, TimeGrid, default_steps, simulate_controlled

EVAL_DOMAIN = 1  # keeps evaluation noise disjoint from training noise


def _noise(seed: int) -> NoiseStream:
    return NoiseStream(int(seed), 0, EVAL_DOMAIN)


def _grid(spec: ProblemSpec, N: int | None) -> TimeGrid:
    return TimeGrid.uniform(spec.T, N if N is not None else default_steps(spec.T))


def estimate_value(psi: Psi | None, spec: ProblemSpec, s0, batch: int = 10_000, seed: int = 0,
                   *, N: int | None = None, control: Callable | None = None) -> tuple[float, float]:
    """``V(0, s0)`` under the learned feedback and its standard error.

    Payoff is the left-endpoint sum of the running payoff plus the terminal
    payoff, reported with the problem's original sign.  ``control(t, s)``
    replaces the network when given.
    """
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (spec.d,):
        raise ValueError(f"s0 must have shape ({spec.d},)")
    grid = _grid(spec, N)
    omega = None if psi is None else psi.omega
    states, run = simulate_controlled(omega, spec, grid, InitialState(s0), batch, _noise(seed),
                                      control)
    payoff = spec.value_sign * (run + np.asarray(spec.terminal(states[-1]), dtype=float))
    se = payoff.std(ddof=1) / np.sqrt(batch) if batch > 1 else 0.0
    return float(payoff.mean()), float(se)


@dataclass(frozen=True)
class SliceRequest:
    """Grid along one coordinate (0-based ``axis``) with the others held fixed."""

    axis: int = 0
    lo: float = -3.0
    hi: float = 3.0
    points: int = 101
    base: tuple | None = None  # fixed values of the other coordinates; zeros if None
    t: float = 0.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("slice needs lo < hi")
        if self.points < 2:
            raise ValueError("slice needs at least 2 points")
        if self.axis < 0:
            raise ValueError("axis must be non-negative")

    def states(self, d: int) -> np.ndarray:
        if self.axis >= d:
            raise ValueError(f"axis {self.axis} out of range for d={d}")
        base = np.zeros(d) if self.base is None else np.asarray(self.base, dtype=float)
        if base.shape != (d,):
            raise ValueError(f"base must have {d} entries")
        pts = np.tile(base, (self.points, 1))
        pts[:, self.axis] = np.linspace(self.lo, self.hi, self.points)
        return pts


@dataclass
class SliceTable:
    columns: list
    rows: np.ndarray = field(repr=False)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        buf.write(delimiter.join(self.columns) + "\n")
        for row in self.rows:
            buf.write(delimiter.join(repr(float(x)) for x in row) + "\n")
        return buf.getvalue()


def value_slice(psi: Psi, spec: ProblemSpec, req: SliceRequest, reference=None,
                batch: int = 10_000, seed: int = 0, N: int | None = None) -> SliceTable:
    """Per grid point: coordinate, value estimate, its standard error and the control.

    ``reference`` is an optional pair of callables ``(value(s), control(s))``
    giving oracle columns at ``t = 0``.
    """
    if req.t != 0.0:
        raise ValueError("value estimates are defined at t = 0")
    pts = req.states(spec.d)
    alpha = np.asarray(control_forward(psi.omega, spec.bounds, req.t, pts))
    cols = ["s", "value", "value_se", "alpha"]
    if reference is not None:
        cols += ["value_ref", "alpha_ref"]
    rows = []
    for i, s in enumerate(pts):
        v, se = estimate_value(psi, spec, s, batch, seed, N=N)
        row = [s[req.axis], v, se, alpha[i, req.axis]]
        if reference is not None:
            row += [float(reference[0](s)), float(np.asarray(reference[1](s))[req.axis])]
        rows.append(row)
    return SliceTable(cols, np.asarray(rows))


def expected_path(psi: Psi | None, spec: ProblemSpec, coordinate: int = 0, batch: int = 10_000,
                  seed: int = 0, *, s0=None, N: int | None = None,
                  control: Callable | None = None) -> SliceTable:
    """Mean and standard deviation of ``S_t[coordinate]`` on the grid."""
    grid = _grid(spec, N)
    s0 = spec.s0 if s0 is None else np.asarray(s0, dtype=float)
    omega = None if psi is None else psi.omega
    states, _ = simulate_controlled(omega, spec, grid, InitialState(s0), batch, _noise(seed),
                                    control)
    x = states[:, :, coordinate]
    return SliceTable(["t", "mean", "std"],
                      np.column_stack([grid.times, x.mean(axis=1), x.std(axis=1)]))
