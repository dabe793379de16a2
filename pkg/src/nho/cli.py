"""Command line: ``nho train | eval | reference | check``.

Exit status is 0 on success, 1 on a validation error and 2 on a numerical
failure.  Failures also print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluation import SliceRequest, estimate_value, expected_path, value_slice
from .problems import canonical_name, make_problem, p1_exact_control, p1_exact_value, p1_reference_control, \
    p1_reference_value, solve_separable_hjb
from .simulator import SimulationBlowUp
from .trainer import NumericalFailure, TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration documents

_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "list": (list,), "dict": (dict,),
          "None": (type(None),), "bool": (bool,)}


def _check_type(path: str, value, annotation: str):
    allowed = tuple(t for part in annotation.split("|") for t in _TYPES[part.strip()])
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{path}: expected {annotation}, got bool")
    if not isinstance(value, allowed):
        raise ConfigError(f"{path}: expected {annotation}, got {type(value).__name__}")


@dataclass
class EvalRequest:
    """Evaluations run after training; ``slice`` uses the CLI slice syntax."""

    slice: str | None = None
    path: int | None = None  # 1-based coordinate for the expected path
    batch: int = 10_000
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig
    out_dir: str
    eval: EvalRequest = field(default_factory=EvalRequest)

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "out_dir": self.out_dir, "eval": vars(self.eval).copy()}


_RUN_KEYS = {"out_dir": "str", "eval": "dict"}


def parse_config(doc: dict, overrides: list[str] = ()) -> RunConfig:
    """Validate a config document, apply ``key=value`` overrides and fill defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        _apply_override(doc, item)
    if "benchmark" not in doc:
        raise ConfigError("missing required key: benchmark")
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    known = set(train_fields) | set(_RUN_KEYS)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    for key, value in doc.items():
        _check_type(key, value, train_fields.get(key) or _RUN_KEYS[key])
    ev = doc.pop("eval", {})
    eval_fields = {f.name: f.type for f in fields(EvalRequest)}
    bad = sorted(set(ev) - set(eval_fields))
    if bad:
        raise ConfigError(f"unknown configuration keys: {['eval.' + k for k in bad]}")
    for key, value in ev.items():
        _check_type(f"eval.{key}", value, eval_fields[key])
    out_dir = doc.pop("out_dir", None)
    try:
        cfg = TrainConfig(**doc).resolved()
        request = EvalRequest(**ev)
        if request.slice is not None:
            parse_slice(request.slice, cfg.d)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if out_dir is None:
        out_dir = f"runs/{cfg.benchmark}-d{cfg.d}"
    return RunConfig(cfg, out_dir, request)


def _apply_override(doc: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = doc
    parts = key.split(".")
    for p in parts[:-1]:
        target = target.setdefault(p, {})
        if not isinstance(target, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    target[parts[-1]] = value


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, overrides)


def parse_slice(text: str, d: int) -> SliceRequest:
    """``axis=1,lo=-3,hi=3,n=101`` (1-based axis) to a :class:`SliceRequest`."""
    opts = {"axis": "1", "lo": "-3", "hi": "3", "n": "101"}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ConfigError(f"slice option {part!r} is not key=value")
        k, v = part.split("=", 1)
        if k.strip() not in opts:
            raise ConfigError(f"unknown slice option {k!r}")
        opts[k.strip()] = v
    try:
        axis, n = int(opts["axis"]), int(opts["n"])
        lo, hi = float(opts["lo"]), float(opts["hi"])
    except ValueError as exc:
        raise ConfigError(f"bad slice {text!r}: {exc}") from exc
    if not 1 <= axis <= d:
        raise ConfigError(f"slice axis {axis} out of range 1..{d}")
    try:
        return SliceRequest(axis - 1, lo, hi, n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands


def _p1_reference(spec):
    if spec.name != "p1-terminal-log":
        return None
    return (lambda s: p1_exact_value(0.0, s, spec.T), lambda s: p1_exact_control(0.0, s, spec.T))


def _write(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _run_eval(psi, cfg: TrainConfig, request: EvalRequest, out_dir: Path | None):
    spec = cfg.problem_spec()
    s0 = np.asarray(cfg.s0, dtype=float)
    v, se = estimate_value(psi, spec, s0, request.batch, request.seed, N=cfg.N)
    print(f"V(0, s0) = {v:.6f} +- {se:.6f}  ({request.batch} paths, seed {request.seed})")
    if request.slice is not None:
        req = parse_slice(request.slice, spec.d)
        table = value_slice(psi, spec, req, _p1_reference(spec), request.batch, request.seed, cfg.N)
        _write(table.to_text(), None if out_dir is None else out_dir / "slice.csv")
    if request.path is not None:
        if not 1 <= request.path <= spec.d:
            raise ConfigError(f"path coordinate {request.path} out of range 1..{spec.d}")
        table = expected_path(psi, spec, request.path - 1, request.batch, request.seed, s0=s0, N=cfg.N)
        _write(table.to_text(), None if out_dir is None else out_dir / "path.csv")


def _progress(line: str):
    print(line, flush=True)


def cmd_train(args) -> int:
    run = load_config(args.config, args.set or [])
    out = Path(args.out or run.out_dir)
    run.out_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True) + "\n")
    res = train(run.train, out_dir=out, progress=None if args.quiet else _progress)
    last = res.history[-1]
    print(f"done: {len(res.history)} iterations, final terminal loss {last.terminal:.6e}; "
          f"artifacts in {out}")
    if run.eval.slice is not None or run.eval.path is not None:
        _run_eval(res.psi, res.config, run.eval, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        psi, cfg, it = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = cfg.resolved()
    request = EvalRequest(args.slice, args.path, args.batch, args.seed)
    print(f"checkpoint {args.checkpoint} (iteration {it}, {cfg.benchmark}, d={cfg.d})")
    out = None if args.out is None else Path(args.out)
    _run_eval(psi, cfg, request, out)
    return EXIT_OK


def cmd_reference(args) -> int:
    name = canonical_name(args.benchmark)
    samples = int(float(args.samples))
    if samples < 2:
        raise ConfigError("samples must be >= 2")
    spec = make_problem(name, args.d)
    if args.slice is None:
        points = (np.zeros(spec.d) if spec.s0 is None else spec.s0)[None]
        axis = 0
    else:
        req = parse_slice(args.slice, spec.d)
        points, axis = req.states(spec.d), req.axis
    lines = []
    if name == "p1-terminal-log":
        lines.append("s,value_ref,value_se,alpha_ref,alpha_se")
        for s in points:
            v, se = p1_reference_value(args.t, s, samples, args.seed, T=spec.T)
            if args.t < spec.T:
                a, ase = p1_reference_control(args.t, s, samples, args.seed + 1, T=spec.T)
            else:
                a, ase = np.asarray(spec.terminal_grad(s[None]))[0], np.zeros(spec.d)
            lines.append(",".join(repr(float(x)) for x in (s[axis], v, se, a[axis], ase[axis])))
    elif name in ("p2-double-well", "p3-liquidation"):
        if args.t != 0.0:
            raise ConfigError("finite-difference references are tabulated at t = 0 only")
        sol = solve_separable_hjb(name, spec.d)
        lines.append("s,value_ref,alpha_ref")
        for s in points:  # both problems are minimizations, as is the solver
            v = sol.total_value(s)
            lines.append(",".join(repr(float(x)) for x in (s[axis], v, sol.alpha(0, s[axis]))))
    else:
        raise ConfigError(f"no reference oracle for {name}")
    _write("\n".join(lines) + "\n", None if args.out is None else Path(args.out))
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(args.filter, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise _CheckFailure(failed)
    return EXIT_OK


class _CheckFailure(Exception):
    def __init__(self, failed):
        super().__init__(f"{len(failed)} checks failed")
        self.failed = failed


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nho", description="Deep FBSDE control solver.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a benchmark")
    t.add_argument("--config", required=True, help="JSON config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", help="run directory (default: out_dir from the config)")
    t.add_argument("--quiet", action="store_true", help="no progress lines")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--slice", help="axis=1,lo=-3,hi=3,n=101 (axis is 1-based)")
    e.add_argument("--path", type=int, help="1-based coordinate for the expected path")
    e.add_argument("--batch", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="directory for slice.csv / path.csv (default: stdout)")

    r = sub.add_parser("reference", help="tabulate reference solutions")
    r.add_argument("--benchmark", required=True)
    r.add_argument("--d", type=int, required=True)
    r.add_argument("--samples", default="1e6")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--t", type=float, default=0.0)
    r.add_argument("--slice", help="axis=1,lo=-3,hi=3,n=101")
    r.add_argument("--out")

    c = sub.add_parser("check", help="run the property suite")
    c.add_argument("--filter", help="substring of a check name, or a group name")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "reference": cmd_reference, "check": cmd_check}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(f"error: {message}", file=sys.stderr)
    print(json.dumps({"status": "error", "exit_code": code, "kind": kind, "message": message, **extra}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _CheckFailure as exc:
        return _fail(EXIT_NUMERICAL, "check-failure", str(exc),
                     failures=[r.to_dict() for r in exc.failed])
    except (NumericalFailure, SimulationBlowUp, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical-failure", str(exc))
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        return _fail(EXIT_INVALID, "validation-error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
