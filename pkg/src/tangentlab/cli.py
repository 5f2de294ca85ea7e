"""Command-line experiment runner.

Subcommands: ``simulate``, ``decouple``, ``verify``, ``jkw``, ``lk-check``,
``describe``.  Every run writes ``report.json`` (validated against
``schemas/report.schema.json``) and CSV tables under ``tables/``.  The exit
status of ``verify`` is 0 iff every non-exploratory check passed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
import traceback
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .characteristics import characteristics_of, model_characteristics
from .config import CheckSpec, ConfigError, ExperimentConfig, load_experiment, load_model
from .decoupling import decoupled_tangent
from .models import MartingaleModel, simulate_batch
from .verify import (
    CheckVerdict,
    char_function_check,
    cox_marginal_check,
    decomposition_check,
    estimate,
    estimate_phi_sup_moment,
    frozen_tangency_check,
    independence_check,
    jkw_convergence_check,
    novikov_check,
    order_check,
    tangency_ratio_check,
    terminal_moment_check,
)

log = logging.getLogger("tangentlab")

__all__ = ["main", "describe", "run_check", "run_experiment", "load_schema"]


def load_schema() -> dict:
    return json.loads(resources.files("tangentlab").joinpath("schemas/report.schema.json").read_text())


def _git_describe(path: str) -> str:
    try:
        out = subprocess.run(
            ["git", "-C", str(Path(path).resolve().parent), "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def model_summary(model: MartingaleModel) -> dict:
    return {"name": model.name or "", "dim": model.dim, "horizon": model.horizon, "parts": model.parts_present(), "deterministic": model.deterministic}


def describe(model: MartingaleModel) -> str:
    """Human-readable summary of a model's parts and characteristics."""
    if model.is_zero:
        return f"zero martingale (dimension {model.dim}, horizon {model.horizon:g})"
    T = model.horizon
    lines = [
        f"model: {model.name or '(unnamed)'}",
        f"dimension {model.dim}, horizon {T:g}",
        "parts: " + ", ".join(model.parts_present()),
        "characteristics: " + ("deterministic" if model.deterministic else "state-dependent"),
    ]
    if model.continuous is not None:
        itg = model.continuous.integrand
        lines.append(f"continuous: {itg.n_intervals} integrand interval(s), noise dimension {itg.noise_dim}" + (", clock time change" if model.continuous.time_change is not None else ""))
    if model.qlc is not None:
        lines.append(f"q.l.c.: {model.qlc.n_marks} mark(s)" + ("" if model.qlc.deterministic else f", intensity feedback {model.qlc.multiplier.kind}"))
    if model.accessible is not None:
        lines.append("accessible times: " + ", ".join(f"{s:g}" for s in model.accessible.times))
    if model.deterministic:
        ch = model_characteristics(model)
        lines.append(f"trace covariation({T:g}) = {ch.trace_covariation(T):.12g}")
        lines.append(f"∫‖x‖²dν(T={T:g}) = {ch.compensator.integral(lambda x: np.sum(x**2, axis=1), T):.12g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def _mark_map(spec):
    if spec in (None, "identity"):
        return lambda x: x
    if isinstance(spec, dict) and "scale" in spec:
        c = float(spec["scale"])
        return lambda x: c * x
    if spec == "norm":
        return lambda x: np.linalg.norm(x, axis=1, keepdims=True)
    raise ValueError(f"unknown mark map {spec!r}")


def run_check(spec: CheckSpec, cfg: ExperimentConfig, index: int, threads: int = 1) -> CheckVerdict:
    """Run one configured check; crashes become an ``error`` verdict."""
    p = dict(spec.params)
    model = spec.model or cfg.model
    seed = cfg.seed + 1009 * index
    res = int(p.get("resolution", cfg.resolution))
    n = int(p.get("n", 1000))
    exploratory = bool(p.get("exploratory", False))
    try:
        k = spec.kind
        if k == "decomposition":
            v = decomposition_check(model, n, seed, res)
        elif k == "tangency":
            v = frozen_tangency_check(model, n, seed, res, float(p.get("tol", 1e-9)))
        elif k == "terminal_moment":
            v = terminal_moment_check(model, n, seed, res, threads=threads)
        elif k == "sup_ratio":
            v = tangency_ratio_check(model, n, float(p.get("p", 2.0)), seed, res, phi=p.get("phi"), band=tuple(p.get("band", (0.25, 4.0))), threads=threads)
        elif k == "phi_moment":
            e = estimate_phi_sup_moment(model, p.get("phi", 2.0), n, seed, res, decoupled=bool(p.get("decoupled", False)), threads=threads)
            v = CheckVerdict(f"E φ(sup‖·‖) ({model.name or 'model'})", "sup-moment estimate", e.estimate, float("inf"), True, "exploratory", {"estimate": e.to_dict()}, exploratory=True)
        elif k == "cox":
            v = cox_marginal_check(model, n, seed, res, threads=threads)
        elif k == "char_function":
            v = char_function_check(model, p.get("thetas", [0.0, 0.5, 1.0, 1.5, 2.0]), p.get("times", [0.2, 0.4, 0.6, 0.8, 1.0]), n, seed, int(p.get("resolution", 0)), p.get("direction"), threads=threads)
        elif k == "independence":
            v = independence_check(model, p.get("windows", [[0.0, 0.5], [0.5, 1.0]]), n, seed, res, p.get("expect", "independent"), threads=threads)
        elif k == "novikov":
            pp = float(p.get("p", 2.0))
            const = p.get("constant", 4.0 if pp == 2.0 else None)
            v = novikov_check(_mark_map(p.get("F")), model, pp, n, seed, res, None if const is None else float(const), threads=threads)
        elif k == "order":
            mn, mm = spec.models.get("model_n"), spec.models.get("model_m")
            if mn is None or mm is None:
                raise ValueError("order check needs 'model_n' and 'model_m'")
            models = (mn, mm) if p.get("mc", True) else None
            v = order_check(model_characteristics(mn), model_characteristics(mm), p.get("mode", "subordination"), models, n, float(p.get("p", 2.0)), seed, res, threads=threads)
            v.name = f"{v.name} ({mn.name} vs {mm.name})"
            if "expect" in p:
                want = p["expect"] == "holds"
                holds = v.details["order"]["holds"]
                v.details["expect"] = p["expect"]
                v.passed = bool(holds == want and (v.passed or not want))
                v.status = "pass" if v.passed else "fail"
        elif k == "jkw":
            v = jkw_convergence_check(model, p.get("n_list", [4, 16, 64, 256]), None, n, seed, res, float(p.get("slack", 0.05)), threads=threads)
        else:  # pragma: no cover - validated at load time
            raise ValueError(f"unknown check {k!r}")
    except Exception as exc:  # a crash is recorded, the run continues
        log.error("check %s crashed: %s", spec.kind, exc)
        return CheckVerdict(f"{spec.kind} (line {spec.line})", "error", float("nan"), float("nan"), False, "error", {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(limit=3)})
    if exploratory:
        v.exploratory = True
        v.status = "exploratory"
    return v


def _summary(verdicts) -> dict:
    counted = [v for v in verdicts if not v.exploratory]
    return {
        "passed": all(v.passed for v in counted),
        "n_checks": len(verdicts),
        "n_failed": sum(1 for v in counted if not v.passed and v.status != "error"),
        "n_errors": sum(1 for v in verdicts if v.status == "error"),
        "n_exploratory": sum(1 for v in verdicts if v.exploratory),
    }


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _verdict_tables(out: Path, verdicts) -> list:
    names = ["tables/checks.csv"]
    _write_csv(out / names[0], ["index", "name", "status", "statistic", "threshold", "exploratory"], [[i, v.name, v.status, v.statistic, v.threshold, v.exploratory] for i, v in enumerate(verdicts)])
    for i, v in enumerate(verdicts):
        if "table" in v.details:
            rows = v.details["table"]
            name = f"tables/check{i:02d}_jkw.csv"
            _write_csv(out / name, ["functional", "n", "gap", "signed_gap", "stderr"], [[r["functional"], r["n"], r["gap"], r["signed_gap"], r["stderr"]] for r in rows])
            names.append(name)
        if "grid" in v.details:
            rows = v.details["grid"]
            name = f"tables/check{i:02d}_charfn.csv"
            _write_csv(out / name, ["x", "t", "emp_re", "emp_im", "G_re", "G_im", "deviation", "stderr"], [[";".join(f"{c:g}" for c in r["x"]), r["t"], r["empirical"][0], r["empirical"][1], r["G"][0], r["G"][1], r["deviation"], r["stderr"]] for r in rows])
            names.append(name)
    return names


def _report(command: str, cfg: ExperimentConfig, model, verdicts, tables, estimates=None, threads=1) -> dict:
    rep = {
        "tool": "tangentlab",
        "version": __version__,
        "command": command,
        "config": {"path": str(cfg.path), "sha256": cfg.sha256, "git_describe": _git_describe(cfg.path)},
        "seed": int(cfg.seed),
        "resolution": int(cfg.resolution),
        "threads": int(threads),
        "checks": [v.to_dict() for v in verdicts],
        "tables": tables,
        "summary": _summary(verdicts),
    }
    if model is not None:
        rep["model"] = model_summary(model)
    if estimates is not None:
        rep["estimates"] = estimates
    return rep


def _write_report(out: Path, rep: dict) -> None:
    jsonschema.validate(rep, load_schema())
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def run_experiment(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    verdicts = []
    for i, spec in enumerate(cfg.checks):
        v = run_check(spec, cfg, i, threads)
        log.info("%s", v.line())
        print(v.line())
        verdicts.append(v)
    tables = _verdict_tables(out, verdicts)
    rep = _report("verify", cfg, cfg.model, verdicts, tables, threads=threads)
    _write_report(out, rep)
    return rep


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _load_any(path: str, seed: int | None) -> ExperimentConfig:
    """An experiment file, or a bare model file wrapped into one."""
    try:
        cfg = load_experiment(path, seed)
    except ConfigError as exc:
        if "missing 'seed'" not in exc.message:
            raise
        cfg = None
    if cfg is not None and (cfg.model is not None or cfg.checks):
        return cfg
    model = load_model(path)
    text = Path(path).read_text()
    return ExperimentConfig(str(path), hashlib.sha256(text.encode()).hexdigest(), int(seed or 0), 256, 1, model, [])


def _paths_output(out: Path, trace, prefix: str, n_write: int) -> list:
    names = []
    for i in range(min(n_write, trace.n_paths)):
        name = f"paths/{prefix}_{int(trace.path_ids[i]):06d}.csv"
        (out / name).parent.mkdir(parents=True, exist_ok=True)
        trace.path(i).to_csv(out / name)
        names.append(name)
    return names


def _cmd_simulate(args, decouple: bool) -> int:
    cfg = _load_any(args.config, args.seed)
    if cfg.model is None:
        raise ConfigError("no model in config", args.config)
    out = Path(args.out)
    res = args.resolution if args.resolution is not None else cfg.resolution
    cfg.resolution = res
    trace = simulate_batch(cfg.model, cfg.seed, np.arange(args.n), res)
    files = _paths_output(out, trace, "M", args.write)
    term = trace.bundle.terminal()
    sup = trace.bundle.sup_norm()
    rows = [[int(trace.path_ids[i]), *term[i].tolist(), float(sup[i])] for i in range(trace.n_paths)]
    header = ["path"] + [f"M_T_{k + 1}" for k in range(cfg.model.dim)] + ["sup_norm"]
    est = {"E|M_T|^2": estimate(np.sum(term**2, axis=1), cfg.seed).to_dict(), "E sup|M|^2": estimate(sup**2, cfg.seed).to_dict()}
    if decouple:
        draw = decoupled_tangent(trace, cfg.seed + 1)
        files += _paths_output(out, draw.record, "N", args.write)
        nterm, nsup = draw.bundle.terminal(), draw.bundle.sup_norm()
        header += [f"N_T_{k + 1}" for k in range(cfg.model.dim)] + ["sup_norm_N"]
        rows = [r + [*nterm[i].tolist(), float(nsup[i])] for i, r in enumerate(rows)]
        est["E|N_T|^2"] = estimate(np.sum(nterm**2, axis=1), cfg.seed).to_dict()
        est["E sup|N|^2"] = estimate(nsup**2, cfg.seed).to_dict()
        ch = [characteristics_of(cfg.model, trace, i).to_dict() for i in range(min(args.write, trace.n_paths))]
        (out / "tables").mkdir(parents=True, exist_ok=True)
        (out / "tables" / "characteristics.json").write_text(json.dumps(ch, indent=1) + "\n")
    _write_csv(out / "tables/terminal.csv", header, rows)
    rep = _report("decouple" if decouple else "simulate", cfg, cfg.model, [], ["tables/terminal.csv"] + files, est, args.threads)
    _write_report(out, rep)
    print(json.dumps(est, indent=1))
    return 0


def _cmd_verify(args) -> int:
    cfg = load_experiment(args.config, args.seed)
    threads = args.threads or cfg.threads
    rep = run_experiment(cfg, Path(args.out), threads)
    s = rep["summary"]
    print(f"{'PASSED' if s['passed'] else 'FAILED'}: {s['n_checks']} checks, {s['n_failed']} failed, {s['n_errors']} errors, {s['n_exploratory']} exploratory")
    return 0 if s["passed"] else 1


def _cmd_single(args, kind: str, params: dict) -> int:
    cfg = _load_any(args.config, args.seed)
    if cfg.model is None:
        raise ConfigError("no model in config", args.config)
    if args.resolution is not None:
        cfg.resolution = args.resolution
    spec = CheckSpec(kind, params)
    v = run_check(spec, cfg, 0, args.threads)
    print(v.line())
    out = Path(args.out)
    tables = _verdict_tables(out, [v])
    rep = _report(args.command, cfg, cfg.model, [v], tables, threads=args.threads)
    _write_report(out, rep)
    return 0 if (v.passed or v.exploratory) else 1


def _floats(s: str) -> list:
    return [float(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tangentlab", description="Tangent-martingale simulation and verification lab.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, metavar="PATH")
        if out:
            p.add_argument("--out", default="out", metavar="DIR")
        p.add_argument("--threads", type=int, default=1, metavar="K")
        p.add_argument("--seed", type=int, default=None, metavar="OVERRIDE")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in ("simulate", "decouple"):
        p = sub.add_parser(name, help=f"{name} paths of a model")
        common(p)
        p.add_argument("--n", type=int, default=100, help="number of paths")
        p.add_argument("--write", type=int, default=5, help="paths written as CSV")
        p.add_argument("--resolution", type=int, default=None)
    p = sub.add_parser("verify", help="run the checks of an experiment file")
    common(p)
    p = sub.add_parser("jkw", help="discretized decoupled sequence convergence")
    common(p)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--n-list", default="4,16,64,256")
    p.add_argument("--resolution", type=int, default=None)
    p = sub.add_parser("lk-check", help="exponential formula against the empirical characteristic function")
    common(p)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--thetas", default="0,0.5,1,1.5,2")
    p.add_argument("--times", default="0.2,0.4,0.6,0.8,1")
    p.add_argument("--resolution", type=int, default=None)
    p = sub.add_parser("describe", help="summarize a model file")
    common(p, out=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "describe":
            cfg = _load_any(args.config, args.seed)
            print(describe(cfg.model) if cfg.model is not None else "no model")
            return 0
        if args.command in ("simulate", "decouple"):
            return _cmd_simulate(args, args.command == "decouple")
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "jkw":
            return _cmd_single(args, "jkw", {"n": args.n, "n_list": [int(x) for x in _floats(args.n_list)]})
        if args.command == "lk-check":
            return _cmd_single(args, "char_function", {"n": args.n, "thetas": _floats(args.thetas), "times": _floats(args.times), "resolution": args.resolution or 0})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
