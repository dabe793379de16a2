"""Stochastic-gradient training of the control and decoupling-field networks."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import LossReport, LossWeights, composite_loss
from .model import ProblemSpec, Psi
from .network import default_spec, init_network, params_from_dict, params_to_dict
from .problems import DEFAULTS, canonical_name, make_problem
from .simulator import INITIAL_LAWS, InitialState, NoiseStream, SimulationBlowUp, TimeGrid, default_steps, rollout

OPTIMIZERS = ("adam", "sgd")
MODES = ("finite-horizon", "ergodic")
CONTROL_GRADIENTS = ("auto", "joint", "hamiltonian-only")
HAMILTONIAN_ADJOINTS = ("path", "field")
HISTORY_COLUMNS = ("iteration", "terminal", "grad_reg", "hamiltonian", "ergodic", "lyapunov",
                   "total", "lr")


class NumericalFailure(ArithmeticError):
    """Training hit a non-finite value."""


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``None`` entries are resolved from the benchmark by :meth:`resolved`.
    """

    benchmark: str = "p1-terminal-log"
    d: int = 1
    problem: dict = field(default_factory=dict)
    mode: str | None = None
    T: float | None = None
    N: int | None = None
    batch: int = 256
    iterations: int = 2000
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 1000.0  # k_0
    lam: float = 0.0
    lam_lyap: float = 0.0
    hamiltonian_weight: float | None = None
    control_gradient: str = "auto"
    hamiltonian_adjoint: str = "path"
    control_lr_scale: float = 1.0
    field_scale: float = 1.0
    burn_in: float = 0.2
    clip_norm: float | None = 10.0
    hidden_widths: list | None = None
    s0: list | None = None
    s0_std: float | None = None
    s0_law: str = "normal"
    init_seed: int = 0
    noise_seed: int = 1
    chunk_size: int | None = None
    workers: int = 1
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.benchmark = canonical_name(self.benchmark)
        for name in ("d", "batch", "iterations", "checkpoint_every", "log_every", "workers"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if self.N is not None and (not isinstance(self.N, (int, np.integer)) or self.N < 1):
            raise ValueError(f"N must be an integer >= 1, got {self.N!r}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.control_gradient not in CONTROL_GRADIENTS:
            raise ValueError(f"control_gradient must be one of {CONTROL_GRADIENTS}")
        if self.hamiltonian_adjoint not in HAMILTONIAN_ADJOINTS:
            raise ValueError(f"hamiltonian_adjoint must be one of {HAMILTONIAN_ADJOINTS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.field_scale > 0:
            raise ValueError("field_scale must be positive")
        if not self.control_lr_scale > 0:
            raise ValueError("control_lr_scale must be positive")
        if not self.lr_decay > 0:
            raise ValueError("lr_decay must be positive")
        for name in ("lam", "lam_lyap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.hamiltonian_weight is not None and self.hamiltonian_weight < 0:
            raise ValueError("hamiltonian_weight must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or null")
        if self.s0_law not in INITIAL_LAWS:
            raise ValueError(f"s0_law must be one of {INITIAL_LAWS}, got {self.s0_law!r}")
        if self.s0_std is not None and self.s0_std < 0:
            raise ValueError("s0_std must be >= 0")
        for name in ("init_seed", "noise_seed"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        unknown = set(self.problem) - set(DEFAULTS[self.benchmark])
        if unknown:
            raise ValueError(f"unknown problem parameters for {self.benchmark}: {sorted(unknown)}")

    def resolved(self) -> "TrainConfig":
        """Copy with every default materialized."""
        c = TrainConfig(**asdict(self))
        ergodic = c.benchmark == "ergodic-ou"
        if c.mode is None:
            c.mode = "ergodic" if ergodic else "finite-horizon"
        if c.T is None:
            c.T = float(self.problem.get("T", DEFAULTS[c.benchmark]["T"]))
        if c.N is None:
            c.N = default_steps(c.T) if not ergodic else int(round(20 * c.T))
        if c.hamiltonian_weight is None:
            c.hamiltonian_weight = 0.0 if c.mode == "ergodic" else 1.0
        if c.control_gradient == "auto":
            c.control_gradient = ("hamiltonian-only"
                                  if c.mode == "finite-horizon" and c.hamiltonian_weight > 0
                                  else "joint")
        if c.hidden_widths is None:
            w = max(64, 2 * c.d)
            c.hidden_widths = [w, w]
        if c.s0_std is None:
            c.s0_std = 1.0 if c.mode == "ergodic" else 0.1
        spec = c.problem_spec()
        if c.s0 is None:
            c.s0 = [float(x) for x in spec.s0]
        if len(c.s0) != spec.d:
            raise ValueError(f"s0 must have {spec.d} entries")
        return c

    def problem_spec(self) -> ProblemSpec:
        params = dict(self.problem)
        if self.T is not None:
            params["T"] = self.T
        return make_problem(self.benchmark, self.d, **params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_schedule(k: int, gamma0: float, k0: float) -> float:
    """``gamma_0 / (1 + k / k_0)``: divergent sum, convergent sum of squares."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return gamma0 / (1.0 + k / k0)


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: list | None = None
    v: list | None = None

    @classmethod
    def create(cls, kind: str, params) -> "OptimizerState":
        if kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
        if kind == "sgd":
            return cls(kind)
        leaves = [np.asarray(x) for x in ad.tree_flatten(params)[0]]
        return cls(kind, 0, [np.zeros_like(x) for x in leaves], [np.zeros_like(x) for x in leaves])


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimizer_step(params, grads, state: OptimizerState, lr):
    """One update; returns ``(new_params, new_state)`` without mutating inputs.

    ``lr`` is a scalar or a sequence with one rate per parameter leaf.
    """
    leaves, rebuild = ad.tree_flatten(params)
    gleaves = ad.tree_flatten(grads)[0]
    if len(leaves) != len(gleaves):
        raise ValueError("gradient structure does not match parameters")
    rates = [lr] * len(leaves) if np.isscalar(lr) else list(lr)
    if len(rates) != len(leaves):
        raise ValueError("need one learning rate per parameter leaf")
    for x, g in zip(leaves, gleaves):
        if np.shape(x) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match {np.shape(x)}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite gradient")
    step = state.step + 1
    if state.kind == "sgd":
        new = [np.asarray(x) - r * np.asarray(g) for x, g, r in zip(leaves, gleaves, rates)]
        return rebuild(new), OptimizerState("sgd", step)
    m = [ADAM_BETA1 * mi + (1 - ADAM_BETA1) * g for mi, g in zip(state.m, gleaves)]
    v = [ADAM_BETA2 * vi + (1 - ADAM_BETA2) * g * g for vi, g in zip(state.v, gleaves)]
    c1 = 1 - ADAM_BETA1 ** step
    c2 = 1 - ADAM_BETA2 ** step
    new = [np.asarray(x) - r * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
           for x, mi, vi, r in zip(leaves, m, v, rates)]
    return rebuild(new), OptimizerState("adam", step, m, v)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in ad.tree_flatten(grads)[0]))


def clip_by_global_norm(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    leaves, rebuild = ad.tree_flatten(grads)
    scale = max_norm / norm
    return rebuild([g * scale for g in leaves])


# ---------------------------------------------------------------------------
# model construction


def init_psi(config: TrainConfig, spec: ProblemSpec) -> Psi:
    c = config
    widths = tuple(c.hidden_widths)
    omega = init_network(default_spec(spec.d, spec.m, output_map="box", stationary=spec.stationary,
                                      horizon=spec.T, hidden_widths=widths),
                         np.random.SeedSequence([c.init_seed, 0]))
    xi = init_network(default_spec(spec.d, spec.d, stationary=spec.stationary, horizon=spec.T,
                                   hidden_widths=widths, output_scale=c.field_scale),
                      np.random.SeedSequence([c.init_seed, 1]))
    return Psi(omega, xi)


def initial_sampler(config: TrainConfig) -> InitialState:
    return InitialState(np.asarray(config.s0, dtype=float), float(config.s0_std), config.s0_law)


def loss_weights(config: TrainConfig) -> LossWeights:
    return LossWeights(config.mode, config.lam, config.lam_lyap, config.hamiltonian_weight,
                       config.burn_in, config.hamiltonian_adjoint)


# ---------------------------------------------------------------------------
# gradient of the batch loss


def _chunk_value_and_grad(psi, spec, grid, sampler, paths, noise, weights, weight, block_control):
    tr = ad.Trace()
    leaves, rebuild = ad.tree_flatten(psi)
    tensors = [tr.leaf(x) for x in leaves]
    traced = rebuild(tensors)
    sim_psi = Psi(psi.omega, traced.xi) if block_control else traced
    batch = rollout(sim_psi, spec, grid, sampler, paths, noise)
    total, parts = composite_loss(batch, traced, spec, weights)
    objective = total * weight
    if isinstance(objective, ad.Tensor):
        grads = tr.backward(objective, tensors)
    else:
        grads = [np.zeros_like(t.value) for t in tensors]
    values = {k: weight * float(np.asarray(ad.value_of(v))) for k, v in parts.items()}
    values["total"] = float(np.asarray(ad.value_of(objective)))
    tr.release()
    return values, grads


def batch_value_and_grad(psi: Psi, spec: ProblemSpec, grid: TimeGrid, sampler: InitialState,
                         batch: int, noise: NoiseStream, weights: LossWeights, *,
                         chunk_size: int | None = None, workers: int = 1,
                         block_control: bool = False):
    """Loss parts and gradient for one batch, reduced in chunk order.

    Chunk boundaries depend on ``chunk_size`` only, so the result is
    bitwise independent of ``workers``.
    """
    paths = np.arange(batch)
    size = batch if chunk_size is None else min(chunk_size, batch)
    chunks = [paths[i:i + size] for i in range(0, batch, size)]

    def run(idx):
        return _chunk_value_and_grad(psi, spec, grid, sampler, idx, noise, weights,
                                     idx.size / batch, block_control)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    values = dict(results[0][0])
    grads = list(results[0][1])
    for v, g in results[1:]:
        for k in values:
            values[k] += v[k]
        grads = [a + b for a, b in zip(grads, g)]
    return values, ad.tree_flatten(psi)[1](grads)


# ---------------------------------------------------------------------------
# checkpoints and history


def checkpoint_document(psi: Psi, config: TrainConfig, iteration: int) -> dict:
    return {
        "format": "nho-checkpoint-1",
        "iteration": int(iteration),
        "seeds": {"init": config.init_seed, "noise": config.noise_seed},
        # worker count changes scheduling only, never results
        "config": {k: v for k, v in config.to_dict().items() if k != "workers"},
        "omega": params_to_dict(psi.omega, config.init_seed),
        "xi": params_to_dict(psi.xi, config.init_seed),
    }


def save_checkpoint(path, psi: Psi, config: TrainConfig, iteration: int) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_document(psi, config, iteration), indent=1) + "\n")
    return path


def load_checkpoint(path) -> tuple[Psi, TrainConfig, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint found at {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "nho-checkpoint-1":
        raise ValueError(f"{path} is not a checkpoint file")
    psi = Psi(params_from_dict(doc["omega"]), params_from_dict(doc["xi"]))
    return psi, TrainConfig.from_dict(doc["config"]), int(doc["iteration"])


def history_csv(history: list[LossReport], lrs: list[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for rep, lr in zip(history, lrs):
        w.writerow([rep.iteration] + [repr(float(getattr(rep, k))) for k in HISTORY_COLUMNS[1:-1]]
                   + [repr(float(lr))])
    return buf.getvalue()


def read_history(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in HISTORY_COLUMNS}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    psi: Psi
    history: list
    lrs: list
    checkpoints: list
    config: TrainConfig

    def history_array(self, column: str) -> np.ndarray:
        return np.array([getattr(r, column) for r in self.history])


def train(config: TrainConfig, spec: ProblemSpec | None = None, *, out_dir=None,
          psi: Psi | None = None, progress: Callable[[str], None] | None = None) -> TrainResult:
    """Run ``config.iterations`` steps of rollout, loss, gradient and update.

    With ``out_dir`` the loss history and checkpoints are written there.
    On a numerical failure the history so far and the last checkpoint are
    kept on disk and :class:`NumericalFailure` is raised.
    """
    config = config.resolved()
    spec = spec if spec is not None else config.problem_spec()
    grid = TimeGrid.uniform(spec.T, config.N)
    sampler = initial_sampler(config)
    weights = loss_weights(config)
    psi = psi if psi is not None else init_psi(config, spec)
    state = OptimizerState.create(config.optimizer, psi)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, lrs, ckpts = [], [], []
    block = config.control_gradient == "hamiltonian-only"
    base_noise = NoiseStream(config.noise_seed)

    def flush():
        if out is not None:
            (out / "history.csv").write_text(history_csv(history, lrs))

    def checkpoint(k):
        if out is not None:
            ckpts.append(save_checkpoint(out / f"checkpoint_{k:07d}.json", psi, config, k))
            save_checkpoint(out / "checkpoint.json", psi, config, k)
            flush()

    # control leaves come first in the flattened Psi
    n_control = len(ad.tree_flatten(psi.omega)[0])
    n_total = len(ad.tree_flatten(psi)[0])
    for k in range(config.iterations):
        lr = lr_schedule(k, config.lr, config.lr_decay)
        rates = [lr * config.control_lr_scale] * n_control + [lr] * (n_total - n_control)
        try:
            values, grads = batch_value_and_grad(
                psi, spec, grid, sampler, config.batch, base_noise.with_stream(k), weights,
                chunk_size=config.chunk_size, workers=config.workers, block_control=block)
        except SimulationBlowUp as exc:
            flush()
            raise NumericalFailure(f"iteration {k}: {exc}") from exc
        if not math.isfinite(values["total"]):
            flush()
            raise NumericalFailure(f"iteration {k}: non-finite loss")
        history.append(LossReport(iteration=k, lam=config.lam, lam_lyap=config.lam_lyap, **values))
        lrs.append(lr)
        grads = clip_by_global_norm(grads, config.clip_norm)
        try:
            psi, state = optimizer_step(psi, grads, state, rates)
        except NumericalFailure as exc:
            flush()
            raise NumericalFailure(f"iteration {k}: {exc}") from exc
        if progress is not None and (k % config.log_every == 0 or k == config.iterations - 1):
            r = history[-1]
            progress(f"iter {k:6d}  total {r.total: .6e}  terminal {r.terminal: .6e}  "
                     f"grad_reg {r.grad_reg: .4e}  H {r.hamiltonian: .4e}  lr {lr:.3e}")
        if (k + 1) % config.checkpoint_every == 0 and k + 1 < config.iterations:
            checkpoint(k + 1)
    checkpoint(config.iterations)
    flush()
    return TrainResult(psi, history, lrs, ckpts, config)
