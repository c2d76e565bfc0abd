"""Command-line entry point: `idsasym <command> --config run.json`.

Settings resolve in the order config file < environment (IDSASYM_SEED, IDSASYM_WORKERS,
IDSASYM_OUT) < command-line flag. Every artifact carries a provenance block with the
hash of the effective configuration, the seed and the tool version.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dos import (DOSCurve, DOSError, fit_expansion, floquet_curve, free_curve, gauge_volume_curve,
                  reference_coefficients)
from .geometry import GeometryError, ResonanceGeometry
from .potential import (Potential, PotentialError, ScaleParameters, check_condition_A, diophantine_quantities)
from .spectral import SpectralError
from .symbols import SymbolError

COMMANDS = ("check", "geometry", "gauge", "dos", "fit", "verify", "verify-residue")

DEFAULTS = {
    "potential": "fixture:mathieu",
    "scale": {"rho_n": 10.0, "k_tilde": 3},
    "seed": 0,
    "workers": 1,
    "out": "out",
    "check": {"k": None, "thresholds": {}},
    "geometry": {"triangulation": "vertex", "max_diameter": None, "floor": None, "samples": 10000},
    "gauge": {"k_tilde": None, "oracle_radius": 60.0},
    "dos": {"method": "floquet", "lambdas": {"start": 100.0, "stop": 1600.0, "num": 20, "spacing": "log"},
            "samples": 1000000, "tolerance": 1e-5, "quadrature": "linear", "n0": None, "n_max": None},
    "fit": {"curve": None, "method": None, "J": 2, "include_logs": False, "max_log_power": 1, "powers": None},
    "verify": {"residue_families": 100, "model_specs": 20, "partition_samples": 1000, "oracle_radius": 60.0},
}

_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}
_OPT_INT = {"type": ["integer", "null"], "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "potential": {"type": ["string", "object"]},
        "dim": {"type": "integer", "enum": [1, 2, 3]},
        "scale": {
            "type": "object", "additionalProperties": False,
            "properties": {"rho_n": _NUM, "k_tilde": {"type": "integer"},
                           "alphas": {"type": "array", "items": _NUM}, "beta": _NUM},
        },
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "check": {
            "type": "object", "additionalProperties": False,
            "properties": {"k": _OPT_INT,
                           "thresholds": {"type": "object", "additionalProperties": False,
                                          "properties": {"r_min": _NUM, "s_min": _NUM, "covolume_min": _NUM}}},
        },
        "geometry": {
            "type": "object", "additionalProperties": False,
            "properties": {"triangulation": {"enum": ["vertex", "gravity"]}, "max_diameter": _OPT_NUM,
                           "floor": _OPT_NUM, "samples": {"type": "integer", "minimum": 0}},
        },
        "gauge": {
            "type": "object", "additionalProperties": False,
            "properties": {"k_tilde": _OPT_INT, "oracle_radius": _OPT_NUM},
        },
        "dos": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": ["floquet", "gauge-volume", "both", "exact"]},
                "lambdas": {"oneOf": [
                    {"type": "array", "items": _NUM, "minItems": 1},
                    {"type": "object", "additionalProperties": False, "required": ["start", "stop", "num"],
                     "properties": {"start": _NUM, "stop": _NUM, "num": {"type": "integer", "minimum": 1},
                                    "spacing": {"enum": ["log", "linear"]}}},
                ]},
                "samples": {"type": "integer", "minimum": 1},
                "tolerance": _NUM,
                "quadrature": {"enum": ["linear", "midpoint"]},
                "n0": _OPT_INT, "n_max": _OPT_INT,
            },
        },
        "fit": {
            "type": "object", "additionalProperties": False,
            "properties": {"curve": {"type": ["string", "null"]}, "method": {"type": ["string", "null"]},
                           "J": {"type": "integer", "minimum": 0}, "include_logs": {"type": "boolean"},
                           "max_log_power": {"type": "integer", "minimum": 1},
                           "powers": {"type": ["array", "null"], "items": _NUM}},
        },
        "verify": {
            "type": "object", "additionalProperties": False,
            "properties": {"residue_families": {"type": "integer", "minimum": 1},
                           "model_specs": {"type": "integer", "minimum": 1},
                           "partition_samples": {"type": "integer", "minimum": 1},
                           "oracle_radius": _OPT_NUM},
        },
    },
}

# fields that change where or how fast results are produced, never their values
_NOT_HASHED = ("out", "workers")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _merge(defaults: dict, given: dict, prefix: str, defaulted: list) -> dict:
    out = {}
    for key, dval in defaults.items():
        path = f"{prefix}{key}"
        if key not in given:
            out[key] = copy.deepcopy(dval)
            defaulted.append(path)
        elif isinstance(dval, dict) and isinstance(given[key], dict) and key != "thresholds":
            out[key] = _merge(dval, given[key], path + ".", defaulted)
        else:
            out[key] = given[key]
    for key in given:
        if key not in defaults:
            out[key] = given[key]
    return out


def _env_int(name: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc


def load_config(path, seed=None, workers=None, out=None, env=None) -> tuple:
    """Effective configuration and the list of defaulted fields."""
    given = {}
    base = Path.cwd()
    if path is not None:
        try:
            given = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = Path(path).resolve().parent
    try:
        jsonschema.validate(given, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from exc
    defaulted = []
    cfg = _merge(DEFAULTS, given, "", defaulted)
    env = os.environ if env is None else env
    overrides = {"seed": ("IDSASYM_SEED", seed), "workers": ("IDSASYM_WORKERS", workers), "out": ("IDSASYM_OUT", out)}
    for key, (var, flag) in overrides.items():
        env_val = env.get(var)
        if env_val not in (None, ""):
            cfg[key] = env_val if key == "out" else _env_int(var, env_val)
            if key in defaulted:
                defaulted.remove(key)
        if flag is not None:
            cfg[key] = flag
            if key in defaulted:
                defaulted.remove(key)
    if cfg["workers"] < 1 or cfg["seed"] < 0:
        raise ConfigError("workers must be >= 1 and seed >= 0")
    cfg["_base"] = str(base)
    return cfg, defaulted


def resolve_potential(spec, base: Path) -> Potential:
    if isinstance(spec, dict):
        return Potential.from_json(spec)
    if spec.startswith("fixture:"):
        name = spec.split(":", 1)[1]
        ref = resources.files("idsasym") / "fixtures" / "potentials" / f"{name}.json"
        if not ref.is_file():
            raise ConfigError(f"unknown potential fixture {name!r}")
        return Potential.from_json(json.loads(ref.read_text(encoding="utf-8")))
    p = Path(spec)
    if not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ConfigError(f"potential file {p} not found")
    return Potential.from_json(p)


def scale_parameters(cfg: dict, dim: int) -> ScaleParameters:
    sc = cfg["scale"]
    if "alphas" in sc or "beta" in sc:
        default = ScaleParameters.default(dim, sc["rho_n"], sc["k_tilde"])
        return ScaleParameters(sc["rho_n"], sc["k_tilde"], tuple(sc.get("alphas", default.alphas)),
                               sc.get("beta", default.beta))
    return ScaleParameters.default(dim, sc["rho_n"], sc["k_tilde"])


def energy_grid(spec) -> np.ndarray:
    if isinstance(spec, list):
        return np.array(sorted(float(v) for v in spec))
    lo, hi, n = float(spec["start"]), float(spec["stop"]), int(spec["num"])
    if spec.get("spacing", "log") == "log":
        if lo <= 0:
            raise ConfigError("log-spaced energies need a positive start")
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


def config_hash(cfg: dict) -> str:
    public = {k: v for k, v in cfg.items() if not k.startswith("_") and k not in _NOT_HASHED}
    return hashlib.sha256(canonical(public).encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ output


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def canonical(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(_plain(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")


class Run:
    """One command invocation: effective config, output directory, cache and provenance."""

    def __init__(self, command: str, cfg: dict, defaulted: list, use_cache: bool):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.use_cache = use_cache
        self.hash = config_hash(cfg)
        self.provenance = {"tool": "idsasym", "version": __version__, "command": command,
                           "config_sha256": self.hash, "seed": cfg["seed"], "defaulted": sorted(defaulted)}
        self._potential = None

    @property
    def potential(self) -> Potential:
        if self._potential is None:
            self._potential = resolve_potential(self.cfg["potential"], Path(self.cfg["_base"]))
            if "dim" in self.cfg and self.cfg["dim"] != self._potential.dim:
                raise ConfigError(f"config dim {self.cfg['dim']} disagrees with the potential (dim "
                                  f"{self._potential.dim})")
        return self._potential

    @property
    def params(self) -> ScaleParameters:
        return scale_parameters(self.cfg, self.potential.dim)

    def cached(self, tag: str, compute):
        """Content-addressed cache keyed by the config hash and a tag."""
        key = hashlib.sha256(f"{self.hash}:{tag}".encode()).hexdigest()
        path = self.out / "cache" / f"{key}.json"
        if self.use_cache and path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))
        value = _plain(compute())
        path.parent.mkdir(exist_ok=True)
        path.write_text(canonical(value), encoding="utf-8")
        return value

    def emit(self, name: str, payload: dict) -> Path:
        path = self.out / name
        write_json(path, {"provenance": self.provenance, **payload})
        return path


# ---------------------------------------------------------------- commands


def cmd_check(run: Run) -> int:
    b = run.potential
    P = run.params
    opts = run.cfg["check"]
    k = opts["k"] or P.k_tilde
    cond_a = check_condition_A(b.frequencies, k).to_dict()
    q = diophantine_quantities(b.frequencies, P)
    th = opts["thresholds"]

    def verdict(value, key):
        if key not in th:
            return {"value": value, "threshold": None, "verdict": "REPORTED"}
        return {"value": value, "threshold": th[key], "verdict": "PASS" if value >= th[key] else "FAIL"}

    cond_c = {"s": verdict(q["s"], "s_min"), "r": verdict(q["r"], "r_min")}
    cond_d = {"min_covolume": verdict(q["min_covolume"], "covolume_min")}
    verdicts = [cond_a["verdict"]] + [v["verdict"] for v in (*cond_c.values(), *cond_d.values())]
    overall = "PASS" if all(v in ("PASS", "REPORTED") for v in verdicts) else "FAIL"
    run.emit("check.json", {
        "potential": b.to_json(), "scale": P.to_dict(), "k": k,
        "condition_A": cond_a,
        "condition_B": {"verdict": "PASS", "note": "finite frequency set"},
        "condition_C": cond_c, "condition_D": cond_d,
        "quantities": q, "verdict": overall,
    })
    print(f"check: {overall} (A: {cond_a['verdict']}, s = {q['s']:.6g}, r = {q['r']:.6g}, "
          f"min covolume = {q['min_covolume']:.6g})")
    return 0 if overall == "PASS" else 1


def cmd_geometry(run: Run) -> int:
    b = run.potential
    P = run.params
    opts = run.cfg["geometry"]
    geo = ResonanceGeometry(b.frequencies, P)
    subspaces = []
    for V in geo.subspaces:
        entry = {"id": V.id, "dim": V.dim, "frame": V.frame.tolist()}
        if 0 < V.dim < geo.d:
            dec = geo.decompose_region(V, opts["triangulation"], opts["max_diameter"], opts["floor"])
            entry["region"] = dec.report()
        subspaces.append(entry)
    classes = {}
    n = opts["samples"]
    if n:
        rng = np.random.default_rng(run.cfg["seed"])
        lam = P.lambda_n
        r = np.sqrt(rng.uniform(lam, 16 * lam, n))
        dirs = rng.normal(size=(n, geo.d))
        pts = r[:, None] * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        ids = geo.classify_many(pts)
        for i in ids:
            dim = geo.subspaces[int(i)].dim
            classes[str(dim)] = classes.get(str(dim), 0) + 1
    run.emit("geometry.json", {
        "scale": P.to_dict(), "L": P.L.tolist(), "s": geo.s_value(),
        "subspace_counts": {str(m): len(geo.table[m]) for m in range(geo.d + 1)},
        "subspaces": subspaces,
        "classification": {"samples": n, "by_dimension": classes},
    })
    certified = all(s["region"]["certified"] for s in subspaces if "region" in s)
    print(f"geometry: {len(geo.subspaces)} subspaces, certificates {'PASS' if certified else 'FAIL'}")
    return 0 if certified else 1


def cmd_gauge(run: Run) -> int:
    from .plotting import plot_norms
    from .suites import gauge_check

    b = run.potential
    P = run.params
    k = run.cfg["gauge"]["k_tilde"]
    if k is not None:
        P = ScaleParameters(P.rho_n, k, P.alphas, P.beta)
    radius = run.cfg["gauge"]["oracle_radius"] if b.dim == 1 else None
    result = gauge_check(b, P, radius)
    diag = result.pop("diagnostics")
    run.emit("gauge.json", {"scale": P.to_dict(), "summary": result, "diagnostics": diag})
    plot_norms(diag, run.out / "gauge_norms.png")
    print(f"gauge: {'PASS' if result['passed'] else 'FAIL'} (commutator residual "
          f"{result['max_commutator_residual']:.3g}, symmetry {result['max_symmetry_residual']:.3g})")
    return 0 if result["passed"] else 1


def _curves(run: Run) -> list:
    b = run.potential
    opts = run.cfg["dos"]
    lams = energy_grid(opts["lambdas"])
    free = not list(b.items())
    methods = {"both": ["floquet", "gauge-volume"]}.get(opts["method"], [opts["method"]])
    curves = []
    for method in methods:
        def compute(method=method):
            if method == "exact":
                if not free:
                    raise ConfigError("the exact method only applies to b = 0")
                c = free_curve(b.dim, lams)
            elif method == "floquet":
                c = floquet_curve(b, lams, opts["tolerance"], opts["quadrature"], run.cfg["workers"],
                                  n0=opts["n0"], n_max=opts["n_max"])
            else:
                c = gauge_volume_curve(b, run.params, lams, opts["samples"], run.cfg["seed"], run.cfg["workers"])
            return {"lambdas": c.lambdas, "values": c.values, "stderr": c.stderr, "method": c.method,
                    "meta": c.meta}
        d = run.cached(f"dos:{method}", compute)
        curves.append(DOSCurve(d["lambdas"], d["values"], d["stderr"], d["method"], d["meta"]))
    return curves


def _csv_provenance(run: Run) -> dict:
    p = dict(run.provenance)
    p["defaulted"] = ";".join(p["defaulted"])
    return p


def cmd_dos(run: Run) -> int:
    from .plotting import plot_curves

    curves = _curves(run)
    parts = []
    for i, c in enumerate(curves):
        text = c.to_csv(provenance=_csv_provenance(run) if i == 0 else None)
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    (run.out / "dos.csv").write_text("".join(parts), encoding="utf-8")
    run.emit("dos_meta.json", {"curves": [{"method": c.method, "meta": c.meta,
                                           "monotone_violations": c.monotone_violations()} for c in curves]})
    plot_curves(curves, run.potential.dim, run.out / "dos.png")
    for c in curves:
        print(f"dos[{c.method}]: {len(c.lambdas)} energies, max stderr {float(np.max(c.stderr)):.3g}")
    return 0


def cmd_fit(run: Run) -> int:
    from .plotting import plot_fit

    opts = run.cfg["fit"]
    b = run.potential
    if opts["curve"]:
        path = Path(opts["curve"])
        if not path.is_absolute():
            path = Path(run.cfg["_base"]) / path
        if not path.is_file():
            raise ConfigError(f"curve file {path} not found")
        curve = DOSCurve.from_csv(path, opts["method"])
    else:
        curves = _curves(run)
        wanted = opts["method"]
        picks = [c for c in curves if wanted is None or c.method == wanted]
        if not picks:
            raise ConfigError(f"no curve with method {wanted!r}")
        curve = picks[0]
    fit = fit_expansion(curve, b.dim, opts["J"], opts["include_logs"], opts["max_log_power"], opts["powers"])
    ref = reference_coefficients(b, b.dim)
    run.emit("fit.json", {"curve_method": curve.method, "points": len(curve.lambdas),
                          "fit": fit.to_dict(), "reference": ref})
    plot_fit(curve, fit, run.out / "fit.png")
    for t, (v, e) in fit.coefficients.items():
        print(f"fit: {t:>28s} = {v: .8g} ± {e:.3g}")
    return 0


def cmd_verify(run: Run) -> int:
    from .plotting import plot_residue_errors
    from .suites import gauge_check, model_integral_check, partition_check, residue_check

    opts = run.cfg["verify"]
    b = run.potential
    P = run.params
    seed = run.cfg["seed"]
    residue = residue_check(opts["residue_families"], seed)
    rows = residue.pop("rows")
    model = model_integral_check(opts["model_specs"], seed)
    part = partition_check(b, P, opts["partition_samples"])
    radius = opts["oracle_radius"] if b.dim == 1 else None
    gauge = gauge_check(b, P, radius)
    gauge.pop("diagnostics")
    suites = {"residue": residue, "model_integral": model, "partition": part, "commutator": gauge}
    passed = all(s["passed"] for s in suites.values())
    run.emit("verify.json", {"scale": P.to_dict(), "suites": suites, "passed": passed})
    _write_residue_csv(run, rows)
    plot_residue_errors(rows, run.out / "residue_errors.png")
    for name, s in suites.items():
        print(f"verify {name:15s} {'PASS' if s['passed'] else 'FAIL'}")
    return 0 if passed else 1


def _write_residue_csv(run: Run, rows):
    import csv
    import io

    buf = io.StringIO()
    for key, value in _csv_provenance(run).items():
        buf.write(f"# {key}: {value}\n")
    fields = ["family", "size", "K", "rho", "direct", "contour", "relative_error", "zero_count", "nodes"]
    w = csv.DictWriter(buf, fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in fields})
    (run.out / "residue.csv").write_text(buf.getvalue(), encoding="utf-8")


def cmd_verify_residue(run: Run) -> int:
    from .suites import residue_check

    res = residue_check(run.cfg["verify"]["residue_families"], run.cfg["seed"])
    rows = res["rows"]
    print(f"{'family':>6} {'size':>4} {'K':>2} {'direct':>22} {'contour':>22} {'rel.err':>9}")
    for r in rows:
        print(f"{r['family']:6d} {r['size']:4d} {r['K']:2d} {r['direct']:22.15e} {r['contour']:22.15e} "
              f"{r['relative_error']:9.2e}")
    _write_residue_csv(run, rows)
    print(f"max relative error {res['max_relative_error']:.3g}: {'PASS' if res['passed'] else 'FAIL'}")
    return 0 if res["passed"] else 1


HANDLERS = {"check": cmd_check, "geometry": cmd_geometry, "gauge": cmd_gauge, "dos": cmd_dos, "fit": cmd_fit,
            "verify": cmd_verify, "verify-residue": cmd_verify_residue}

MODULE_ERRORS = (ConfigError, PotentialError, GeometryError, SymbolError, SpectralError, DOSError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idsasym", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"idsasym {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", help="output directory (env IDSASYM_OUT)")
        p.add_argument("--seed", type=int, help="random seed (env IDSASYM_SEED)")
        p.add_argument("--workers", type=int, help="worker threads (env IDSASYM_WORKERS)")
        p.add_argument("--no-cache", action="store_true", help="recompute instead of reading cached sweeps")
    return parser


def _fail(kind: str, message: str, command: str | None) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message, "command": command}},
                                sort_keys=True) + "\n")
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, defaulted = load_config(args.config, args.seed, args.workers, args.out)
        run = Run(args.command, cfg, defaulted, not args.no_cache)
        return HANDLERS[args.command](run)
    except MODULE_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), args.command)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return _fail(type(exc).__name__, str(exc), args.command)


if __name__ == "__main__":
    sys.exit(main())
