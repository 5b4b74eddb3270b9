"""Command-line front end, run records and the results cache.

Exit codes: 0 success, 1 usage or invalid input, 2 solver non-convergence,
3 capacity exceeded.
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .functional import DomainError, LiftingPoint, QuadOrders, default_orders, psi_terms
from .lab import CapacityError, MAX_EXHAUSTIVE_N, satisfiability_curve
from .quadrature import EvaluationError, ParameterError
from .saddle import NonConvergenceError, SolverSettings
from .threshold import (
    BracketError,
    MonotonicityError,
    ThresholdResult,
    find_threshold,
    restricted_threshold,
    sweep_levels,
)

RECORD_SCHEMA = "abplift.run/1"
THRESHOLD_SCHEMA = "abplift.threshold/1"
EVALUATE_SCHEMA = "abplift.evaluate/1"
TABLE_SCHEMA = "abplift.tables/1"
CURVE_SCHEMA = "abplift.curve/1"
CACHE_ENV = "ABPLIFT_CACHE_DIR"
CACHE_FILE = "records.jsonl"

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_CAPACITY = 0, 1, 2, 3
# keys that vary between identical runs; kept out of the primary payload
_TIMING_KEYS = frozenset({"wall_time"})


class UsageError(ValueError):
    """Bad flags or input files."""


# ------------------------------------------------------------------ records


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def content_hash(parameters: dict) -> str:
    """Git blob hash of the canonical JSON form of ``parameters``."""
    body = canonical_json(parameters).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def split_timing(obj: Any) -> tuple[Any, dict]:
    """Remove run-time measurements from a payload, returning them by path."""
    timing: dict[str, float] = {}

    def walk(node, path):
        if isinstance(node, dict):
            out = {}
            for k, v in node.items():
                if k in _TIMING_KEYS:
                    timing[".".join(path + [k])] = v
                else:
                    out[k] = walk(v, path + [k])
            return out
        if isinstance(node, list):
            return [walk(v, path + [str(i)]) for i, v in enumerate(node)]
        return node

    return walk(obj, []), timing


@dataclass(frozen=True)
class RunRecord:
    command: str
    parameters: dict
    outputs: Any
    settings_hash: str
    started: str
    finished: str
    version: str = __version__
    timing: dict = field(default_factory=dict)
    schema: str = RECORD_SCHEMA

    @classmethod
    def create(cls, command: str, parameters: dict, outputs: Any, started: datetime) -> "RunRecord":
        payload, timing = split_timing(outputs)
        return cls(
            command=command,
            parameters=parameters,
            outputs=payload,
            settings_hash=content_hash({"command": command, **parameters}),
            started=started.isoformat(),
            finished=datetime.now(timezone.utc).isoformat(),
            timing=timing,
        )

    def as_dict(self) -> dict:
        return {
            "schema": self.schema,
            "command": self.command,
            "settings_hash": self.settings_hash,
            "parameters": self.parameters,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
            "version": self.version,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            command=data["command"], parameters=data["parameters"], outputs=data["outputs"],
            settings_hash=data["settings_hash"], started=data["started"], finished=data["finished"],
            version=data.get("version", ""), timing=data.get("timing", {}),
            schema=data.get("schema", RECORD_SCHEMA),
        )


def cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(Path.home(), ".cache")
    return Path(base) / "abplift"


class ResultCache:
    """Append-only JSON-lines store of run records, guarded by advisory locks."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else cache_dir()
        self.path = self.directory / CACHE_FILE

    def lookup(self, command: str, settings_hash: str) -> Optional[RunRecord]:
        if not self.path.exists():
            return None
        found = None
        with open(self.path, "r", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        data = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # a torn line from a crashed writer
                    if data.get("settings_hash") == settings_hash and data.get("command") == command:
                        found = data
                        break
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        return RunRecord.from_dict(found) if found else None

    def append(self, record: RunRecord) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record.as_dict(), sort_keys=True, allow_nan=True) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def records(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                lines = fh.readlines()
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        out = []
        for line in lines:
            try:
                out.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError):
                continue
        return out


# ------------------------------------------------------------------ parsing


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise UsageError("empty order list")
    return vals


def parse_alpha_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop included) or a comma-separated list."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if not step > 0.0 or stop < start:
                raise UsageError(f"invalid grid {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid alpha grid {text!r}") from exc


def point_from_mapping(values: dict[str, float], r: Optional[int] = None) -> LiftingPoint:
    """LiftingPoint from keys ``r``, ``p2..``, ``qs2..``, ``cs3..``."""
    values = dict(values)
    if "r" in values:
        rv = values.pop("r")
        if rv != int(rv):
            raise UsageError(f"r must be an integer, got {rv}")
        if r is not None and int(rv) != r:
            raise UsageError(f"point file is level {int(rv)} but --level {r} was given")
        r = int(rv)
    if r is None:
        raise UsageError("the level r is missing")
    if r < 2:
        raise UsageError(f"points are defined for r >= 2, got r={r}")
    expected = [f"p{k}" for k in range(2, r + 1)] + [f"qs{k}" for k in range(2, r + 1)]
    expected += [f"cs{k}" for k in range(3, r + 1)]
    missing = [k for k in expected if k not in values]
    extra = sorted(set(values) - set(expected))
    if missing:
        raise UsageError(f"missing keys for level {r}: {', '.join(missing)}")
    if extra:
        raise UsageError(f"unexpected keys for level {r}: {', '.join(extra)}")
    return LiftingPoint(
        r,
        tuple(values[f"p{k}"] for k in range(2, r + 1)),
        tuple(values[f"qs{k}"] for k in range(2, r + 1)),
        tuple(values[f"cs{k}"] for k in range(3, r + 1)),
    )


def parse_point_text(text: str, r: Optional[int] = None) -> LiftingPoint:
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key in values:
            raise UsageError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise UsageError(f"line {lineno}: {val!r} is not a number") from exc
    return point_from_mapping(values, r)


def format_point_text(point: LiftingPoint) -> str:
    lines = [f"r = {point.r}"] + [f"{k} = {v!r}" for k, v in point.as_dict().items()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ output


def _table(rows: Iterable[tuple[str, Any]]) -> str:
    rows = [(k, _fmt(v)) for k, v in rows]
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _emit(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _out_format(args) -> str:
    if args.out_format:
        return args.out_format
    return "table" if sys.stdout.isatty() else "json"


def _json_text(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


# ------------------------------------------------------------------ settings


def _orders(args, r: int) -> QuadOrders:
    base = default_orders(r)
    binary = parse_int_list(args.binary_orders) if args.binary_orders else base.binary
    sphere = parse_int_list(args.sphere_orders) if args.sphere_orders else base.sphere
    if len(binary) != r - 1 or len(sphere) != r - 1:
        raise UsageError(f"level {r} needs {r - 1} orders per side")
    return QuadOrders(binary, sphere)


def _settings(args, levels: Iterable[int]) -> tuple[SolverSettings, dict]:
    orders = {r: _orders(args, r) for r in levels if r >= 2}
    settings = SolverSettings(
        fd_step=args.fd_step, grad_tol=args.grad_tol, max_iters=args.max_iters, quad_orders=orders,
    )
    recorded = {
        "fd_step": settings.fd_step,
        "grad_tol": settings.grad_tol,
        "max_iters": settings.max_iters,
        "quad_orders": {str(r): o.as_dict() for r, o in orders.items()},
    }
    return settings, recorded


def _cached_run(args, command: str, parameters: dict, compute):
    """Run ``compute`` unless an identical run is cached; returns the payload."""
    cache = None if args.no_cache else ResultCache()
    digest = content_hash({"command": command, **parameters})
    if cache is not None:
        hit = cache.lookup(command, digest)
        if hit is not None:
            print(f"cache hit: {digest}", file=sys.stderr)
            return hit.outputs
    started = datetime.now(timezone.utc)
    outputs = compute()
    record = RunRecord.create(command, parameters, outputs, started)
    if cache is not None:
        cache.append(record)
    return record.outputs


# ------------------------------------------------------------------ commands


def _threshold_payload(res: ThresholdResult) -> dict:
    out = res.as_dict()
    out["schema"] = THRESHOLD_SCHEMA
    if res.r == 1:
        # closed form: no solver diagnostics to report
        out.pop("diagnostics", None)
    return out


def cmd_threshold(args) -> int:
    r = args.level
    if r < 1:
        raise UsageError("--level must be >= 1")
    if args.restricted and r < 2:
        raise UsageError("--restricted needs --level >= 2")
    bracket = _bracket(args.bracket)
    levels = range(2, r + 1)
    settings, recorded = _settings(args, levels)
    params = {
        "level": r, "kappa": args.kappa, "alpha_tol": args.alpha_tol, "restricted": args.restricted,
        "bracket": list(bracket), **recorded,
    }

    def compute():
        if args.restricted:
            res = restricted_threshold(r, args.kappa, settings, args.alpha_tol, bracket=bracket)
        else:
            res = find_threshold(r, args.kappa, settings, args.alpha_tol, bracket=bracket)
        return _threshold_payload(res)

    payload = _cached_run(args, "threshold", params, compute)
    if _out_format(args) == "json":
        _emit(_json_text(payload), None)
    else:
        st = payload["stationary"]
        rows = [("level", payload["r"]), ("kappa", payload["kappa"]),
                ("alpha_critical", payload["alpha_critical"]), ("bracket", payload["bracket"]),
                ("psi_residual", payload["psi_residual"]), ("restricted", payload["restricted"])]
        rows += list(st["point"].items())
        if st.get("saddle_profile"):
            rows.append(("maximization_type", st["saddle_profile"]["maximization_type"]))
        _emit(_table(rows), None)
    return EXIT_OK


def _bracket(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--bracket expects 'lo,hi', got {text!r}") from exc
    return lo, hi


def table_rows(results: Sequence[ThresholdResult]) -> tuple[list[str], list[list[Any]]]:
    top = max(res.r for res in results)
    header = ["r", "gamma_sq"]
    header += [f"p{k}" for k in range(2, top + 1)] + [f"qs{k}" for k in range(2, top + 1)]
    header += [f"cs{k}" for k in range(3, top + 1)] + ["alpha"]
    rows = []
    for res in results:
        vals: dict[str, Any] = {"r": res.r, "alpha": res.alpha_critical}
        pt = res.stationary.point
        if isinstance(pt, LiftingPoint):
            vals.update(pt.as_dict())
        else:
            vals["gamma_sq"] = pt.gamma_sq
        rows.append([vals.get(h) for h in header])
    return header, rows


def cmd_tables(args) -> int:
    if args.max_level < 1:
        raise UsageError("--max-level must be >= 1")
    settings, recorded = _settings(args, range(2, args.max_level + 1))
    params = {"max_level": args.max_level, "kappa": args.kappa, **recorded}

    def compute():
        results = sweep_levels(args.max_level, args.kappa, settings)
        header, rows = table_rows(results)
        return {"schema": TABLE_SCHEMA, "header": header, "rows": rows,
                "levels": [_threshold_payload(res) for res in results]}

    payload = _cached_run(args, "tables", params, compute)
    _emit(_csv_text(payload["header"], payload["rows"]), args.out)
    return EXIT_OK


def cmd_empirical(args) -> int:
    if args.mode == "exhaustive" and args.n > MAX_EXHAUSTIVE_N:
        raise CapacityError(f"exhaustive mode is limited to n <= {MAX_EXHAUSTIVE_N}")
    alphas = parse_alpha_grid(args.alpha_grid)
    if not alphas:
        raise UsageError("empty alpha grid")
    params = {"n": args.n, "alphas": alphas, "trials": args.trials, "kappa": args.kappa,
              "seed": args.seed, "mode": args.mode, "restarts": args.restarts,
              "max_flips": args.max_flips}

    def compute():
        curve = satisfiability_curve(
            args.n, alphas, args.trials, args.kappa, args.seed, search=args.mode,
            restarts=args.restarts, max_flips=args.max_flips,
        )
        return {"schema": CURVE_SCHEMA, "points": [c.as_dict() for c in curve]}

    payload = _cached_run(args, "empirical", params, compute)
    rows = [[p["alpha"], p["probability"], p["stderr"], p["trials"], payload["schema"]]
            for p in payload["points"]]
    _emit(_csv_text(["alpha", "p_hat", "stderr", "trials", "schema"], rows), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        text = Path(args.point_file).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read point file: {exc}") from exc
    point = parse_point_text(text, args.level)
    orders = _orders(args, point.r)
    terms = psi_terms(point, args.kappa, args.alpha, orders)
    payload = {
        "schema": EVALUATE_SCHEMA, "r": point.r, "kappa": args.kappa, "alpha": args.alpha,
        "point": point.as_dict(), "quad_orders": orders.as_dict(),
        "quadratic": terms.quadratic, "binary": terms.binary, "sphere": terms.sphere,
        "psi": terms.psi,
    }
    if _out_format(args) == "json":
        _emit(_json_text(payload), None)
    else:
        _emit(_table([(k, payload[k]) for k in ("r", "alpha", "kappa", "quadratic", "binary",
                                                 "sphere", "psi")]), None)
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _solver_flags(p: argparse.ArgumentParser) -> None:
    defaults = SolverSettings()
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--binary-orders", help="comma-separated orders, innermost level first")
    p.add_argument("--sphere-orders", help="comma-separated orders, innermost level first")
    p.add_argument("--fd-step", type=float, default=defaults.fd_step)
    p.add_argument("--grad-tol", type=float, default=defaults.grad_tol)
    p.add_argument("--max-iters", type=int, default=defaults.max_iters)
    p.add_argument("--no-cache", action="store_true", help="neither read nor write the results cache")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abplift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("threshold", help="critical density at one lifting level")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--alpha-tol", type=float, default=None)
    p.add_argument("--restricted", action="store_true",
                   help="keep the exponents in the decreasing regime")
    p.add_argument("--bracket", default="0.5,1.5")
    p.add_argument("--out-format", choices=("table", "json"))
    _solver_flags(p)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("tables", help="thresholds and parameters for levels 1..max-level as CSV")
    p.add_argument("--max-level", type=int, required=True)
    p.add_argument("--out", default=None)
    _solver_flags(p)
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("empirical", help="finite-n satisfiability curve")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--alpha-grid", default="0.2:1.4:0.2", help="start:stop:step or a comma list")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("exhaustive", "local"), default="exhaustive")
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--max-flips", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_empirical)

    p = sub.add_parser("evaluate", help="functional value and its terms at a given point")
    p.add_argument("--point-file", required=True)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--binary-orders")
    p.add_argument("--sphere-orders")
    p.add_argument("--out-format", choices=("table", "json"))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (NonConvergenceError, BracketError, MonotonicityError, EvaluationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (UsageError, DomainError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
