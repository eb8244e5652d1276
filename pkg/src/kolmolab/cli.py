"""Batch front-end: ``kolmolab run | list-catalog | validate-config``.

Configs are YAML documents; the accepted keys are listed in ``SCHEMA`` and
documented in the README.  Unknown keys are errors.  Every error names the
offending field and its line in the document.

Exit codes: 0 pass, 1 certification failure, 2 configuration error,
3 numerical failure.
"""

import argparse
import hashlib
import json
import math
import os
import platform
import re
import sys
import time

import yaml

EXIT_OK, EXIT_CERT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "KOLMOLAB_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigProblem(Exception):
    """Config error before any library import (kept independent of numpy)."""

    def __init__(self, path, message, line=None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{path}: {message}")
        self.path, self.line = path, line


# --- YAML with line numbers ---------------------------------------------------------------

def _construct(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for kn, vn in node.value:
            key = kn.value
            if key in out:
                raise ConfigProblem(f"{path}.{key}".lstrip("."), "duplicate key", kn.start_mark.line + 1)
            out[key] = _construct(vn, f"{path}.{key}".lstrip("."), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_text(text):
    """Parse a config document into ``(tree, lines)``; ``lines`` maps dotted paths to lines."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigProblem("<document>", f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                            mark.line + 1 if mark else None) from None
    if node is None:
        raise ConfigProblem("<document>", "empty config")
    lines = {}
    tree = _construct(node, "", lines)
    if not isinstance(tree, dict):
        raise ConfigProblem("<document>", "top level must be a mapping", 1)
    return tree, lines


# --- schema ---------------------------------------------------------------------------------

def _num(positive=False, integer=False, nonneg=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return "must be a number"
        if integer and int(v) != v:
            return "must be an integer"
        if not math.isfinite(v):
            return "must be finite"
        if positive and not v > 0:
            return "must be positive"
        if nonneg and v < 0:
            return "must be nonnegative"
    return check


def _choice(*opts):
    def check(v):
        if v not in opts:
            return f"must be one of {list(opts)}"
    return check


def _numlist(v):
    if not isinstance(v, list) or not v or any(_num()(x) for x in v):
        return "must be a nonempty list of numbers"


def _boolean(v):
    if not isinstance(v, bool):
        return "must be true or false"


def _params(v):
    if not isinstance(v, dict):
        return "must be a mapping"


def _bytes(v):
    if _num(positive=True)(v) is None:
        return None
    if isinstance(v, str) and re.fullmatch(r"\s*[0-9.]+\s*(B|KiB|MiB|GiB|TiB)?\s*", v):
        return None
    return "must be a byte count such as 2GiB"


_NORM = {"functional": _choice("nash_e", "kato_d1", "kato_d", "nash_frac_alpha"),
         "h": _num(positive=True), "backend": _choice("auto", "analytic", "grid"),
         "alpha": _num(positive=True), "mu": _num(positive=True)}

SCHEMA = {
    "preset": _choice("paper-suite"),
    "criteria": _numlist,
    "seed": _num(integer=True, nonneg=True),
    "memory_budget": _bytes,
    "output": {"directory": lambda v: None if isinstance(v, str) and v else "must be a path"},
    "grid": {"dimension": _choice(1, 2, 3), "half_width": _num(positive=True),
             "points_per_axis": _num(positive=True, integer=True)},
    "matrix": {"kind": lambda v: None if isinstance(v, str) else "must be a string", "params": _params},
    "drift": {"kind": lambda v: None if isinstance(v, str) else "must be a string", "params": _params,
              "strict": _boolean},
    "norms": [_NORM],
    "constants": {k: _num(positive=True) for k in
                  ("sigma", "xi", "c1", "c2", "c3", "c4", "c5", "c6", "M", "mu0", "lambda0")},
    "solver": {"sources": lambda v: None if v == "center" or (
                   isinstance(v, list) and all(isinstance(s, list) for s in v)) else
                   "must be 'center' or a list of node index lists",
               "ladder": {"first": _num(positive=True), "last": _num(positive=True),
                          "n": _num(positive=True, integer=True)},
               "times": _numlist, "stepper": _choice("implicit_euler", "crank_nicolson"),
               "dt_ratio": _num(positive=True), "adjoint": _boolean,
               "initial": _choice("mollified", "delta")},
    "analyses": {
        "nash": {"delta": _num(positive=True), "variant": _choice("N", "u")},
        "nash_hat": {"delta": _num(positive=True), "lam": _num(positive=True), "eps": _num(positive=True)},
        "fits": {"upper_mu": _num(positive=True), "lower_mu": _num(positive=True)},
        "mass": {"tol": _num(positive=True)},
        "harnack": {"alpha": _num(positive=True), "beta": _num(positive=True),
                    "gamma": _num(positive=True), "R": _num(positive=True), "s": _num(positive=True),
                    "x0": _numlist},
        "holder": {"z": _numlist, "R": _num(positive=True), "s": _num(positive=True),
                   "alpha": _num(positive=True)},
        "operator_norms": {"omega2": _num(nonneg=True), "c6": _num(positive=True)},
        "duhamel": {"lam": _num(positive=True), "delta": _num(positive=True), "eps": _num(positive=True),
                    "h": _num(positive=True), "n_terms": _num(positive=True, integer=True),
                    "c0": _num(positive=True), "c0_hat": _num(positive=True)},
        "convergence": {"eps_ladder": _numlist, "times": _numlist, "noise": _num(positive=True)},
        "identities": {"d": _choice(1, 2, 3), "lam": _num(positive=True), "delta": _num(positive=True)},
    },
}

# analyses that consume a kernel table
NEEDS_TABLE = ("nash", "nash_hat", "fits", "mass", "harnack", "holder", "operator_norms", "duhamel")
REQUIRED = {"duhamel": ("lam", "delta", "h"), "convergence": ("eps_ladder",)}


def _walk(tree, schema, path, lines):
    if isinstance(schema, list):
        if not isinstance(tree, list):
            raise ConfigProblem(path, "must be a list", lines.get(path))
        for i, item in enumerate(tree):
            _walk(item, schema[0], f"{path}[{i}]", lines)
        return
    if isinstance(schema, dict):
        if not isinstance(tree, dict):
            raise ConfigProblem(path or "<document>", "must be a mapping", lines.get(path))
        for key, val in tree.items():
            sub = f"{path}.{key}".lstrip(".")
            if key not in schema:
                raise ConfigProblem(sub, f"unknown key (allowed: {sorted(schema)})", lines.get(sub))
            _walk(val, schema[key], sub, lines)
        return
    msg = schema(tree)
    if msg:
        raise ConfigProblem(path, msg, lines.get(path))


def _parse_bytes(v):
    if isinstance(v, (int, float)):
        return float(v)
    m = re.fullmatch(r"\s*([0-9.]+)\s*(B|KiB|MiB|GiB|TiB)?\s*", v)
    scale = {"B": 1, None: 1, "KiB": 2**10, "MiB": 2**20, "GiB": 2**30, "TiB": 2**40}[m.group(2)]
    return float(m.group(1)) * scale


def validate(tree, lines):
    """Structural checks plus cross-field consistency.  Returns the tree."""
    _walk(tree, SCHEMA, "", lines)
    if "preset" in tree:
        extra = set(tree) - {"preset", "criteria", "seed", "output", "memory_budget"}
        if extra:
            k = sorted(extra)[0]
            raise ConfigProblem(k, "not allowed together with a preset", lines.get(k))
        return tree
    for key in ("grid", "matrix", "drift"):
        if key not in tree:
            raise ConfigProblem(key, "missing section", None)
    for key in ("dimension", "half_width", "points_per_axis"):
        if key not in tree["grid"]:
            raise ConfigProblem(f"grid.{key}", "missing", lines.get("grid"))
    for key in ("matrix", "drift"):
        if "kind" not in tree[key]:
            raise ConfigProblem(f"{key}.kind", "missing", lines.get(key))
    ana = tree.get("analyses", {})
    for name, keys in REQUIRED.items():
        for k in keys:
            if name in ana and k not in ana[name]:
                raise ConfigProblem(f"analyses.{name}.{k}", "missing", lines.get(f"analyses.{name}"))
    for name in ana:
        if name in NEEDS_TABLE and "solver" not in tree:
            raise ConfigProblem(f"analyses.{name}", "needs a kernel table but no 'solver' stage is "
                                "requested", lines.get(f"analyses.{name}"))
    if ana.get("nash", {}).get("variant") == "u" and not tree.get("solver", {}).get("adjoint"):
        raise ConfigProblem("analyses.nash.variant", "variant 'u' needs solver.adjoint: true",
                            lines.get("analyses.nash.variant"))
    sol = tree.get("solver", {})
    if "solver" in tree and ("ladder" in sol) == ("times" in sol):
        raise ConfigProblem("solver", "give exactly one of 'ladder' or 'times'", lines.get("solver"))
    if "ladder" in sol:
        for k in ("first", "last", "n"):
            if k not in sol["ladder"]:
                raise ConfigProblem(f"solver.ladder.{k}", "missing", lines.get("solver.ladder"))
    if "constants" in tree:
        missing = {"sigma", "xi", "c1", "c2", "c3", "c4", "c5", "c6"} - set(tree["constants"])
        if missing:
            raise ConfigProblem("constants", f"missing {sorted(missing)}", lines.get("constants"))
    return tree


def _build(tree, lines):
    """Catalog objects from a validated tree (catalog errors become config errors)."""
    from .drift_catalog import DriftSpec, MatrixSpec
    from .errors import InputError
    from .field_core import GridSpec
    g = tree["grid"]
    budget = _parse_bytes(tree["memory_budget"]) if "memory_budget" in tree else None
    out = {}
    for key, fn in (("grid", lambda: GridSpec(int(g["dimension"]), float(g["half_width"]),
                                              int(g["points_per_axis"]), budget)),
                    ("matrix", lambda: MatrixSpec.make(tree["matrix"]["kind"], int(g["dimension"]),
                                                       **tree["matrix"].get("params", {}))),
                    ("drift", lambda: DriftSpec.make(tree["drift"]["kind"], int(g["dimension"]),
                                                     tree["drift"].get("strict", True),
                                                     **tree["drift"].get("params", {})))):
        try:
            out[key] = fn()
        except (InputError, TypeError) as exc:
            field = {"grid": "grid", "matrix": "matrix.kind", "drift": "drift.kind"}[key]
            if "parameter" in str(exc) and key != "grid":
                field = f"{key}.params"
            raise ConfigProblem(field, str(exc), lines.get(field, lines.get(key))) from None
    sol = tree.get("solver")
    if sol and isinstance(sol.get("sources"), list):
        for i, s in enumerate(sol["sources"]):
            if len(s) != out["grid"].d or any(not 0 <= int(v) < out["grid"].N for v in s):
                p = f"solver.sources[{i}]"
                raise ConfigProblem(p, f"must be {out['grid'].d} node indices in [0, {out['grid'].N})",
                                    lines.get(p))
    xi = _window(out["matrix"])[1]
    ana = tree.get("analyses", {})
    for name in ("nash", "nash_hat", "duhamel"):
        cfg = ana.get(name, {})
        p = f"analyses.{name}.delta"
        if "delta" in cfg and not cfg["delta"] > xi:
            raise ConfigProblem(p, f"must exceed the upper ellipticity xi = {xi}", lines.get(p))
        if "lam" in cfg and "delta" in cfg and not cfg["lam"] > 2 * cfg["delta"]:
            p = f"analyses.{name}.lam"
            raise ConfigProblem(p, "must exceed 2 delta", lines.get(p))
    if "constants" in tree:
        from .drift_norms import GenericConstants
        try:
            out["constants"] = GenericConstants(out["grid"].d, **tree["constants"])
        except InputError as exc:
            raise ConfigProblem("constants", str(exc), lines.get("constants")) from None
    return out


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigProblem("<file>", f"cannot read config: {exc}") from None
    tree, lines = load_text(text)
    validate(tree, lines)
    objs = {} if "preset" in tree else _build(tree, lines)
    return tree, lines, objs


# --- output ---------------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, float):
        if math.isfinite(x):
            return format(x, ".17g")
        return json.dumps("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(x, int):
        return str(x)
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in sorted(x.items())) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    if hasattr(x, "tolist"):
        return _fmt(x.tolist())
    if hasattr(x, "items"):
        return _fmt(dict(x))
    return json.dumps(str(x))


def dumps(obj) -> str:
    """JSON with every float at 17 significant digits and sorted keys."""
    return _fmt(obj) + "\n"


class Run:
    def __init__(self, outdir):
        self.outdir = outdir
        os.makedirs(outdir, exist_ok=True)
        self.artifacts = []
        self.stages = {}
        self.certifications = {}

    def write(self, name, text):
        path = os.path.join(self.outdir, name)
        data = text.encode() if isinstance(text, str) else text
        with open(path, "wb") as fh:
            fh.write(data)
        self.artifacts.append({"path": name, "sha256": hashlib.sha256(data).hexdigest()})
        return path

    def stage(self, name, fn):
        t0 = time.perf_counter()
        rec = {"status": "ok"}
        try:
            fn()
        except Exception as exc:       # stage failures are recorded, later stages still run
            rec = {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "kind": _kind(exc)}
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        self.stages[name] = rec
        return rec["status"] == "ok"


def _kind(exc):
    from .errors import ConfigError, FitFailure, InputError
    if isinstance(exc, FitFailure):
        return "certification"
    if isinstance(exc, (ConfigError, InputError, ConfigProblem)):
        return "config"
    return "numerical"


def _versions():
    import numpy
    import scipy
    from . import __version__
    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "pyyaml": yaml.__version__, "kolmolab": __version__}


def _ladder(sol):
    from .kernel_solver import geometric_ladder
    if "times" in sol:
        return sorted(float(t) for t in sol["times"])
    lad = sol["ladder"]
    return list(geometric_ladder(float(lad["first"]), float(lad["last"]), int(lad["n"])))


def _norm_request(req, b, grid):
    from . import drift_norms as dn
    fn = req["functional"]
    kw = {"backend": req.get("backend", "auto"), "grid": grid}
    if fn == "nash_frac_alpha":
        return dn.fractional_nash_norm(b, req.get("alpha", 1.0), req.get("mu", 1.0), **kw)
    h = req.get("h", 1.0)
    return {"nash_e": dn.nash_norm_e, "kato_d1": dn.kato_norm_d1, "kato_d": dn.kato_norm_d}[fn](b, h, **kw)


def execute(tree, objs, outdir, report=print):
    """Run the requested stages; returns ``(exit status, manifest dict)``."""
    import numpy as np
    seed = int(tree.get("seed", 0))
    np.random.seed(seed)
    run = Run(outdir)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    state = {}

    if "preset" in tree:
        from . import suite

        def battery():
            crit = [int(c) for c in tree.get("criteria", [])] or None
            res = suite.run_all(crit, report=report)
            run.write("acceptance.json", dumps([{"number": r.number, "name": r.name, "ok": r.ok,
                                                  "details": r.details} for r in res]))
            for r in res:
                run.certifications[f"criterion_{r.number}"] = bool(r.ok)
        run.stage("acceptance", battery)
        return _finish(run, tree, started)

    from .drift_catalog import sample_drift, sample_matrix
    from .drift_norms import eta_bound
    from .kernel_solver import DtPolicy, assemble, kernel_table
    grid, mspec, dspec = objs["grid"], objs["matrix"], objs["drift"]

    def fields():
        state["a"] = sample_matrix(mspec, grid)
        state["b_field"] = sample_drift(dspec, grid)
        state["b"] = None if dspec.kind == "zero" else state["b_field"]
        info = {"grid": {"d": grid.d, "L": grid.L, "N": grid.N, "h": grid.h},
                "matrix": {"kind": mspec.kind, "params": dict(mspec.params)},
                "drift": {"kind": dspec.kind, "params": dict(dspec.params), "strict": dspec.strict}}
        run.write("fields.json", dumps(info))
    run.stage("fields", fields)

    if "norms" in tree:
        def norms():
            reports = []
            for req in tree["norms"]:
                target = state["b_field"] if req.get("backend") == "grid" else dspec
                reports.append(_norm_request(req, target, grid))
            from .drift_norms import reports_to_csv
            run.write("norms.json", dumps([r.to_dict() for r in reports]))
            run.write("norms.csv", reports_to_csv(reports))
            c = objs.get("constants")
            if c is not None:
                verdicts = []
                for req, rep in zip(tree["norms"], reports):
                    if req["functional"] != "nash_e":
                        continue
                    val = rep.value if rep.finite else math.inf
                    if math.isfinite(val):
                        eb = eta_bound(val, req.get("h", 1.0) / c.c4, c.mu0, c)
                        ok, row = eb.small, {"eta": eb.eta, "eta_term": eb.eta_term,
                                             "threshold": eb.threshold}
                    else:
                        ok, row = False, {"verdict": rep.verdict}
                    row.update(h=req.get("h", 1.0), value=val, small=ok)
                    verdicts.append(row)
                    run.certifications[f"smallness_h={req.get('h', 1.0)}"] = bool(ok)
                run.write("smallness.json", dumps(verdicts))
        run.stage("norms", norms)

    if "solver" in tree:
        sol = tree["solver"]

        def solver():
            op = assemble(state["a"], state["b"])
            srcs = [tuple(grid.N // 2 for _ in range(grid.d))] if sol.get("sources", "center") == "center" \
                else [tuple(int(v) for v in s) for s in sol["sources"]]
            pol = DtPolicy(ratio=float(sol.get("dt_ratio", 0.15)))
            tab = kernel_table(op, srcs, _ladder(sol), policy=pol,
                               stepper=sol.get("stepper", "crank_nicolson"),
                               initial=sol.get("initial", "mollified"), adjoint=bool(sol.get("adjoint", False)))
            tab.meta.update(sigma=_window(mspec)[0], xi=_window(mspec)[1])
            state["op"], state["table"] = op, tab
            run.write("kernel_table.bin", tab.to_bytes())
            run.write("kernel_diagnostics.csv", tab.diagnostics_csv())
        run.stage("solver", solver)

    ana = tree.get("analyses", {})
    for name in SCHEMA["analyses"]:
        if name not in ana:
            continue
        cfg = ana[name]
        if name in NEEDS_TABLE and "table" not in state:
            run.stages[f"analysis:{name}"] = {"status": "skipped", "error": "solver stage failed",
                                              "kind": "numerical", "seconds": 0.0}
            continue
        run.stage(f"analysis:{name}", lambda n=name, c=cfg: _analysis(n, c, state, objs, run, tree))
    return _finish(run, tree, started)


def _window(mspec):
    p = mspec.params
    if "sigma" in p:
        return p["sigma"], p["xi"]
    mu = p.get("mu", 1.0)
    return mu, mu


def _analysis(name, cfg, state, objs, run, tree):
    from . import bound_lab, duhamel, nash_lab
    tab, a = state.get("table"), state.get("a")
    grid, mspec, dspec = objs["grid"], objs["matrix"], objs["drift"]
    sigma, xi = _window(mspec)
    if name == "nash":
        delta = cfg.get("delta", 2 * xi)
        fn = nash_lab.nash_N_u if cfg.get("variant", "N") == "u" else nash_lab.nash_N
        tr = fn(tab, a, delta)
        run.write("nash.csv", tr.to_csv())
        run.write("nash.json", dumps(tr.summary()))
    elif name == "nash_hat":
        lam = cfg.get("lam", 4 * xi)
        delta = cfg.get("delta", 1.5 * xi)
        tr = nash_lab.hat_scan(tab, a, delta, lam, cfg.get("eps", duhamel.default_epsilon(lam, delta)))
        run.write("nash_hat.csv", tr.to_csv())
        run.write("nash_hat.json", dumps(tr.summary()))
    elif name == "fits":
        out = {}
        for side, key, default in (("upper", "upper_mu", 1.1 * xi), ("lower", "lower_mu", 0.8 * sigma)):
            fit = bound_lab.fit_gaussian(tab, side, cfg.get(key, default))
            out[side] = fit.to_dict()
            run.certifications[f"envelope_{side}"] = bool(fit.ok)
        run.write("fits.json", dumps(out))
    elif name == "mass":
        rep = bound_lab.mass_conservation(tab, cfg.get("tol", 1e-3))
        run.write("mass.json", dumps({"rows": rep.rows, "max_deviation": rep.max_deviation, "ok": rep.ok}))
    elif name == "harnack":
        p = bound_lab.HarnackParams(**{k: cfg[k] for k in ("alpha", "beta", "gamma", "R") if k in cfg})
        x0 = cfg.get("x0", list(tab.source_point(0)))
        rep = bound_lab.harnack_scan(tab, x0, cfg.get("s", float(tab.times[-1])), p)
        run.write("harnack.json", rep.to_json(sort_keys=True))
    elif name == "holder":
        rep = bound_lab.holder_fit(tab, cfg.get("z", list(tab.source_point(0))), cfg.get("R", 1.0),
                                   cfg.get("s", float(tab.times[-1])), cfg.get("alpha", 0.5))
        run.write("holder.json", rep.to_json(sort_keys=True))
    elif name == "operator_norms":
        rep = bound_lab.operator_norms(tab, cfg.get("omega2", 0.0), cfg.get("c6"))
        run.write("operator_norms.json", rep.to_json(sort_keys=True))
    elif name == "duhamel":
        lam, delta, h = cfg["lam"], cfg["delta"], cfg["h"]
        eps = cfg.get("eps", duhamel.default_epsilon(lam, delta))
        c0 = cfg.get("c0") or nash_lab.nash_N(tab, a, delta).empirical_constant()
        c0h = cfg.get("c0_hat") or nash_lab.hat_scan(tab, a, delta, lam, eps).empirical_constant()
        est = duhamel.contraction_estimate(dspec, a, lam, delta, h, c0, c0h, epsilon=eps, grid=grid)
        S = duhamel.duhamel_series(state["op"], tab.sources[0], tab.times,
                                   n_terms=int(cfg.get("n_terms", duhamel.MAX_TERMS)), envelope=lam)
        S.set_contraction(est.C_hat)
        run.write("duhamel.json", dumps({"contraction": est.to_dict(), "series": S.summary()}))
        run.write("duhamel.csv", S.to_csv())
        run.certifications["duhamel_contraction"] = bool(est.small)
    elif name == "convergence":
        rep = bound_lab.convergence_study(mspec, dspec, grid, cfg["eps_ladder"],
                                          cfg.get("times", (0.05, 0.1, 0.2)), noise=cfg.get("noise", 0.05))
        run.write("convergence.json", rep.to_json(sort_keys=True))
        run.certifications["convergence"] = bool(rep.ok)
    elif name == "identities":
        rep = nash_lab.aux_identities(d=cfg.get("d", 3), lam=cfg.get("lam", 4.0), delta=cfg.get("delta", 1.0),
                                      seed=int(tree.get("seed", 0)))
        run.write("identities.json", dumps({r.name: {"max_error": r.max_error, "violations": r.violations,
                                                     "samples": r.samples, "ok": r.ok} for r in rep}))
        run.certifications["identities"] = all(r.ok for r in rep)


def _finish(run, tree, started):
    kinds = {r.get("kind") for r in run.stages.values() if r["status"] != "ok"}
    if "numerical" in kinds:
        status = EXIT_NUMERIC
    elif "config" in kinds:
        status = EXIT_CONFIG
    elif "certification" in kinds or not all(run.certifications.values()):
        status = EXIT_CERT
    else:
        status = EXIT_OK
    manifest = {"config": tree, "versions": _versions(), "started": started, "stages": run.stages,
                "certifications": run.certifications, "artifacts": run.artifacts, "exit_status": status}
    with open(os.path.join(run.outdir, "manifest.json"), "w") as fh:
        fh.write(dumps(manifest))
    return status, manifest


# --- entry point ----------------------------------------------------------------------------

def _set_threads(n):
    n = n or os.environ.get(THREADS_ENV)
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = str(int(n))


def _parser():
    p = argparse.ArgumentParser(prog="kolmolab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute a config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides output.directory)")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, help=f"BLAS/OpenMP threads (default ${THREADS_ENV})")
    r.add_argument("--memory-budget", help="e.g. 2GiB")
    v = sub.add_parser("validate-config", help="check a config without running it")
    v.add_argument("config")
    c = sub.add_parser("list-catalog", help="drift and matrix kinds")
    c.add_argument("--json", action="store_true", help="machine-readable listing")
    c.add_argument("--dimension", type=int, choices=(1, 2, 3))
    return p


def _catalog(args):
    from .drift_catalog import catalog_listing
    rows = catalog_listing(args.dimension)
    if args.json:
        print(dumps(rows), end="")
        return EXIT_OK
    print(f"{'family':<7} {'kind':<19} {'d>=':<4} parameters")
    for r in rows:
        params = ", ".join(f"{k}={v['default']} ({v['range']})" for k, v in r["parameters"].items()) or "-"
        print(f"{r['family']:<7} {r['kind']:<19} {r['min_dimension']:<4} {params}")
        print(f"{'':<32}{r['description']}")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "run":
        _set_threads(args.threads)      # before numpy is first imported
    if args.command == "list-catalog":
        return _catalog(args)
    try:
        if args.command == "run":
            tree, lines, _ = load_config(args.config)
            if args.seed is not None:
                tree["seed"] = args.seed
            if args.memory_budget is not None:
                tree["memory_budget"] = args.memory_budget
            validate(tree, lines)
            objs = {} if "preset" in tree else _build(tree, lines)
        else:
            tree, lines, objs = load_config(args.config)
    except ConfigProblem as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        stages = ["acceptance"] if "preset" in tree else \
            ["fields"] + [s for s in ("norms", "solver") if s in tree] + \
            [f"analysis:{a}" for a in tree.get("analyses", {})]
        print("config ok; stages: " + ", ".join(stages))
        return EXIT_OK
    outdir = args.output or tree.get("output", {}).get("directory", "kolmolab-out")
    status, manifest = execute(tree, objs, outdir)
    for name, rec in manifest["stages"].items():
        msg = f"  {rec['error']}" if rec["status"] != "ok" else ""
        print(f"{name:<24} {rec['status']:<8} {rec['seconds']:.3f}s{msg}")
    for name, ok in manifest["certifications"].items():
        print(f"{name:<24} {'PASS' if ok else 'FAIL'}")
    print(f"manifest: {os.path.join(outdir, 'manifest.json')}  exit {status}")
    return status


if __name__ == "__main__":
    sys.exit(main())
