"""TOML model and experiment files.

Model file::

    dim = 2
    horizon = 1.0
    name = "mixed"

    [continuous]
    mesh = [0.0, 0.5, 1.0]            # optional, default [0, T]
    matrix = [[1.0, 0.0], [0.0, 1.0]]  # same matrix on every interval
    # matrices = [M_1, ..., M_K]       # or one matrix per interval
    time_change = { times = [0.0, 1.0], values = [0.0, 2.0] }
    feedback = { kind = "tanh", kappa = 0.5, weights = [1.0, 0.0] }
    # feedback = { kind = "jump_count", kappa = 0.5, cap = 2 }

    [qlc]
    marks = [[1.0, 0.0], [0.0, -1.0]]
    rates = [1.0, 2.0]                 # or [[qlc.intensity]] breakpoint lists
    feedback = { kind = "after_first_jump", factor = 2.0 }
    # feedback = { kind = "count_linear", slope = 0.5, cap = 10 }

    [accessible]
    times = [0.5]
    [[accessible.laws]]
    values = [[1.0, 1.0], [-1.0, -1.0]]
    probs = [0.5, 0.5]

A law may instead be a table keyed on the previous accessible jumps::

    [[accessible.laws]]
    default = { values = [[1.0], [-1.0]], probs = [0.5, 0.5] }
    table = [ { history = [[1.0]], values = [[2.0], [-2.0]], probs = [0.5, 0.5] } ]

Experiment file: top-level ``seed`` (required), ``resolution``, ``threads``,
a ``[model]`` table (``file = "model.toml"``, ``library = "mixed-2d"`` or
an inline model) and a list of ``[[checks]]`` with a ``kind`` and per-check
parameters; any check may carry its own ``model`` table.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10
    import tomli as tomllib

from . import library
from .models import (
    AccessibleKernel,
    AfterFirstJump,
    ContinuousPart,
    CountLinear,
    DiscreteLaw,
    ElementaryIntegrand,
    JumpCountFeedback,
    MartingaleModel,
    QlcIntensity,
    TanhFeedback,
    validate,
)
from .paths import TimeChange

__all__ = ["ConfigError", "ExperimentConfig", "CheckSpec", "load_model", "parse_model", "load_experiment", "CHECK_KINDS"]

CHECK_KINDS = (
    "decomposition",
    "tangency",
    "terminal_moment",
    "sup_ratio",
    "phi_moment",
    "cox",
    "char_function",
    "independence",
    "novikov",
    "order",
    "jkw",
)


class ConfigError(ValueError):
    """Configuration problem with a source location."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.message = message
        self.path = path
        self.line = line
        loc = f"{path or '<config>'}:{line}" if line else f"{path or '<config>'}"
        super().__init__(f"{loc}: {message}")


class _Locator:
    """Find the line of a ``[section]`` or ``key =`` in the raw text."""

    def __init__(self, text: str, path: str | None):
        self.lines = text.splitlines()
        self.path = path

    def line_of(self, section: str = "", key: str | None = None, occurrence: int = 0) -> int | None:
        current, seen = "", -1
        header = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?")
        for i, raw in enumerate(self.lines, 1):
            m = header.match(raw)
            if m:
                current = m.group(1)
                if current == section:
                    seen += 1
                    if key is None and seen == occurrence:
                        return i
                continue
            if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
                return i
        if key is not None:
            for i, raw in enumerate(self.lines, 1):
                if re.match(rf"^\s*{re.escape(key)}\s*=", raw) or re.search(rf"[{{,]\s*{re.escape(key)}\s*=", raw):
                    return i
        return None

    def error(self, message: str, section: str = "", key: str | None = None) -> ConfigError:
        return ConfigError(message, self.path, self.line_of(section, key) or self.line_of(section))


def _read(path) -> tuple:
    p = Path(path)
    if not p.exists():
        raise ConfigError("file not found", str(path))
    text = p.read_text()
    return text, _parse_text(text, str(path))


def _parse_text(text: str, path: str | None):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"parse error: {exc}", path, int(m.group(1)) if m else None) from None


def _array(loc, value, section, key, ndim=None):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise loc.error(f"'{key}' must be numeric", section, key) from None
    if ndim is not None and a.ndim != ndim:
        raise loc.error(f"'{key}' must be a {ndim}-dimensional array", section, key)
    return a


def _law(loc, spec, section, d):
    if "values" not in spec or "probs" not in spec:
        raise loc.error("a law needs 'values' and 'probs'", section)
    v = _array(loc, spec["values"], section, "values")
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[1] != d:
        raise loc.error(f"law values must be vectors in R^{d}", section, "values")
    p = _array(loc, spec["probs"], section, "probs", 1)
    if p.size != v.shape[0]:
        raise loc.error("'probs' and 'values' lengths differ", section, "probs")
    return DiscreteLaw(v, p)


def parse_model(data: dict, loc: _Locator | None = None, prefix: str = "") -> MartingaleModel:
    """Build a model from parsed TOML (``prefix`` is the table path for messages)."""
    loc = loc or _Locator("", None)
    sec = (lambda s: f"{prefix}.{s}" if prefix and s else (prefix or s))
    if "library" in data:
        name = data["library"]
        if name not in library.MODELS:
            raise loc.error(f"unknown library model {name!r}", sec(""), "library")
        kw = {k: v for k, v in data.items() if k not in ("library", "file")}
        try:
            return library.MODELS[name](**kw)
        except TypeError as exc:
            raise loc.error(f"bad parameters for {name!r}: {exc}", sec(""), "library") from None
    for k in ("dim", "horizon"):
        if k not in data:
            raise loc.error(f"missing '{k}'", sec(""), None)
    d, T = int(data["dim"]), float(data["horizon"])
    name = str(data.get("name", ""))
    cont = qlc = acc = None
    if "continuous" in data:
        c = data["continuous"]
        s = sec("continuous")
        mesh = _array(loc, c.get("mesh", [0.0, T]), s, "mesh", 1)
        if "matrices" in c:
            mats = _array(loc, c["matrices"], s, "matrices")
            if mats.ndim == 2:
                mats = mats[None]
        elif "matrix" in c:
            m = np.atleast_2d(_array(loc, c["matrix"], s, "matrix"))
            mats = np.broadcast_to(m, (mesh.size - 1,) + m.shape).copy()
        elif "sigma" in c:
            mats = np.broadcast_to(float(c["sigma"]) * np.eye(d), (mesh.size - 1, d, d)).copy()
        else:
            raise loc.error("continuous part needs 'matrix', 'matrices' or 'sigma'", s)
        if mats.ndim != 3 or mats.shape[0] != mesh.size - 1:
            raise loc.error("need one integrand matrix per mesh interval", s, "matrices" if "matrices" in c else "mesh")
        fb = None
        if "feedback" in c:
            f = c["feedback"]
            kind = f.get("kind")
            if kind == "tanh":
                fb = TanhFeedback(float(f.get("kappa", 0.5)), tuple(float(x) for x in f.get("weights", [1.0] * d)))
            elif kind == "jump_count":
                fb = JumpCountFeedback(float(f.get("kappa", 0.5)), int(f.get("cap", 1)))
            else:
                raise loc.error(f"unknown continuous feedback kind {kind!r}", s, "feedback")
        tc = None
        if "time_change" in c:
            tcs = c["time_change"]
            try:
                tc = TimeChange(np.asarray(tcs["times"], dtype=float), np.asarray(tcs["values"], dtype=float))
            except (KeyError, ValueError, TypeError) as exc:
                raise loc.error(f"bad time change: {exc}", s, "time_change") from None
        cont = ContinuousPart(ElementaryIntegrand(mesh, mats, fb), tc)
    if "qlc" in data:
        q = data["qlc"]
        s = sec("qlc")
        if "marks" not in q:
            raise loc.error("q.l.c. part needs 'marks'", s)
        marks = _array(loc, q["marks"], s, "marks")
        if marks.ndim == 1:
            marks = marks[:, None] if d == 1 else marks[None]
        mult = None
        if "feedback" in q:
            f = q["feedback"]
            kind = f.get("kind")
            if kind == "after_first_jump":
                mult = AfterFirstJump(float(f.get("factor", 2.0)))
            elif kind == "count_linear":
                mult = CountLinear(float(f.get("slope", 0.5)), int(f.get("cap", 10)))
            else:
                raise loc.error(f"unknown q.l.c. feedback kind {kind!r}", s, "feedback")
        if "rates" in q:
            rates = _array(loc, q["rates"], s, "rates", 1)
            if rates.size != marks.shape[0]:
                raise loc.error("one rate per mark required", s, "rates")
            qlc = QlcIntensity.constant_rates(T, marks, rates, mult)
        elif "intensity" in q:
            bps = []
            for k, it in enumerate(q["intensity"]):
                if "times" not in it or "values" not in it:
                    raise ConfigError("intensity needs 'times' and 'values'", loc.path, loc.line_of(sec("qlc.intensity"), None, k))
                bps.append((np.asarray(it["times"], dtype=float), np.asarray(it["values"], dtype=float)))
            qlc = QlcIntensity(marks, tuple(bps), mult)
        else:
            raise loc.error("q.l.c. part needs 'rates' or [[qlc.intensity]] tables", s)
    if "accessible" in data:
        a = data["accessible"]
        s = sec("accessible")
        times = _array(loc, a.get("times", []), s, "times", 1)
        laws = []
        for k, spec in enumerate(a.get("laws", [])):
            ls = sec("accessible.laws")
            if "table" in spec or "default" in spec:
                table = {}
                for row in spec.get("table", []):
                    hist = np.asarray(row.get("history", []), dtype=float).reshape(-1, d)
                    key = tuple(tuple(float(x) for x in r) for r in hist)
                    table[key] = _law(loc, row, ls, d)
                if "default" in spec:
                    table[None] = _law(loc, spec["default"], ls, d)
                laws.append(table)
            else:
                laws.append(_law(loc, spec, ls, d))
        if len(laws) != times.size:
            raise loc.error(f"{times.size} accessible times but {len(laws)} laws", s, "times")
        acc = AccessibleKernel(times, laws)
    model = MartingaleModel(d, T, cont, qlc, acc, name)
    problems = validate(model)
    if problems:
        part = next((p for p in ("continuous", "qlc", "accessible") if problems[0].startswith(p)), "")
        line = loc.line_of(sec(part)) if part else None
        if line is None:
            line = loc.line_of(prefix) if prefix else 1
        raise ConfigError("invalid model: " + "; ".join(problems), loc.path, line)
    return model


def load_model(path) -> MartingaleModel:
    text, data = _read(path)
    loc = _Locator(text, str(path))
    if "model" in data and "dim" not in data:
        return _model_from_table(data["model"], loc, Path(path).parent, "model")
    return parse_model(data, loc)


def _model_from_table(table: dict, loc: _Locator, base: Path, prefix: str) -> MartingaleModel:
    if "file" in table:
        p = Path(table["file"])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise loc.error(f"model file {str(p)!r} not found", prefix, "file")
        return load_model(p)
    return parse_model(table, loc, prefix)


@dataclass
class CheckSpec:
    kind: str
    params: dict
    model: MartingaleModel | None = None
    models: dict = field(default_factory=dict)
    line: int | None = None


@dataclass
class ExperimentConfig:
    path: str
    sha256: str
    seed: int
    resolution: int
    threads: int
    model: MartingaleModel | None
    checks: list
    out: str | None = None
    raw: dict = field(default_factory=dict)


def load_experiment(path, seed_override: int | None = None) -> ExperimentConfig:
    text, data = _read(path)
    loc = _Locator(text, str(path))
    base = Path(path).parent
    if "seed" not in data and seed_override is None:
        raise ConfigError("missing 'seed' (no wall-clock seeding)", str(path), 1)
    seed = int(seed_override if seed_override is not None else data["seed"])
    resolution = int(data.get("resolution", 256))
    threads = int(data.get("threads", 1))
    model = _model_from_table(data["model"], loc, base, "model") if "model" in data else None
    checks = []
    for k, c in enumerate(data.get("checks", [])):
        line = loc.line_of("checks", None, k)
        kind = c.get("kind")
        if kind not in CHECK_KINDS:
            raise ConfigError(f"unknown check kind {kind!r} (known: {', '.join(CHECK_KINDS)})", str(path), line)
        n = c.get("n", 1000)
        if kind not in ("order",) and int(n) < 100:
            raise ConfigError(f"check '{kind}': N = {n} is below the minimum of 100", str(path), line)
        params = {key: v for key, v in c.items() if key not in ("kind", "model", "model_n", "model_m")}
        spec = CheckSpec(kind, params, line=line)
        if "model" in c:
            spec.model = _model_from_table(c["model"], loc, base, "checks.model")
        for key in ("model_n", "model_m"):
            if key in c:
                spec.models[key] = _model_from_table(c[key], loc, base, f"checks.{key}")
        if spec.model is None and model is None and kind != "order":
            raise ConfigError(f"check '{kind}' has no model and the experiment declares none", str(path), line)
        checks.append(spec)
    return ExperimentConfig(str(path), hashlib.sha256(text.encode()).hexdigest(), seed, resolution, threads, model, checks, data.get("out"), data)
