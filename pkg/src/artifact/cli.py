"""Command-line front end: predict, simulate, compare, graphs, kergin, selftest."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import clusters, graphs, kacrice, kergin, partitions, simulate
from .gaussian import GradientKernel, kernel_from_config

SCHEMA_VERSION = 1
DEFAULT_SEED = 20240901
THREADS_ENV = "ARTIFACT_THREADS"
SUBCOMMANDS = ("predict", "simulate", "compare", "graphs", "kergin", "selftest")

EXIT_OK, EXIT_VALIDATION, EXIT_TOLERANCE, EXIT_USAGE = 0, 2, 3, 64


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, Fraction):
        return str(x)
    return x


def _dumps(doc: dict) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def _csv(doc: dict, rows: List[dict]) -> str:
    buf = io.StringIO()
    head = {"schema": doc.get("schema"), "command": doc.get("command"), "config": doc.get("config"),
            "seed": doc.get("seed")}
    buf.write("# " + json.dumps(_jsonable(head), sort_keys=True) + "\n")
    if rows:
        keys = list(rows[0].keys())
        for r in rows[1:]:
            keys += [k for k in r if k not in keys]
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(v) for k, v in r.items()})
    return buf.getvalue()


def emit(args, doc: dict, rows: List[dict], name: str) -> None:
    doc = {"schema": SCHEMA_VERSION, **doc}
    text = _csv(doc, rows) if args.format == "csv" else _dumps(doc)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.{args.format}").write_text(text)
    sys.stdout.write(text)


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config: file {path!r} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config: invalid JSON ({e})") from None


# ---------------------------------------------------------------------------
# kernels and modes

def _kernel_cfg(name: str, dim: int, scale: float) -> dict:
    key = name.replace("-", "_")
    if key not in ("bargmann_fock", "gaussian"):
        raise ValidationError(f"kernel: unknown kernel {name!r}")
    return {"name": key, "d": dim, "k": 1, "scale": scale}


def _field_kernel(kcfg: dict, mode: str):
    base = kernel_from_config(kcfg)
    return GradientKernel(base) if mode == "critical-points" else base


def _check_mode(mode: str, dim: int):
    if mode not in simulate.STATISTICS:
        raise ValidationError(f"mode: must be one of {sorted(simulate.STATISTICS)}")
    if dim not in (1, 2):
        raise ValidationError("dim: must be 1 or 2")
    if mode == "zeros" and dim != 1:
        raise ValidationError("mode: zeros needs dim 1")
    if mode == "nodal-length" and dim != 2:
        raise ValidationError("mode: nodal-length needs dim 2")


# ---------------------------------------------------------------------------
# subcommands

def cmd_predict(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    mode = cfg.get("mode", args.mode)
    dim = int(cfg.get("dim", args.dim))
    _check_mode(mode, dim)
    kcfg = cfg.get("kernel") or _kernel_cfg(args.kernel, dim, args.scale)
    seed = int(cfg.get("seed", args.seed))
    mc = int(cfg.get("mc_samples", args.mc_samples))
    want_g2 = bool(cfg.get("gamma2", dim == 1 or args.gamma2))
    kernel = _field_kernel(kcfg, mode)
    g1 = kacrice.gamma1(kernel, seed=seed)
    doc = {"command": "predict",
           "config": {"mode": mode, "dim": dim, "kernel": kcfg, "mc_samples": mc, "gamma2": want_g2},
           "seed": seed, "gamma1": g1.value, "gamma1_stderr": g1.stderr}
    rows = []
    if want_g2:
        g2 = kacrice.gamma2(kernel, mc_samples=mc, seed=seed)
        doc.update({"gamma2": g2["value"], "gamma2_stderr": g2["stderr"], "gamma2_meta": g2["meta"]})
    if dim == 1:
        for t in np.round(np.arange(0.25, 4.01, 0.25), 10):
            r2 = kacrice.rho2_exact_1d(kernel, float(t))
            rows.append({"t": float(t), "rho2": r2, "F2": r2 - g1.value ** 2})
        doc["density_table"] = rows
    emit(args, doc, rows or [{"gamma1": g1.value, "gamma2": doc.get("gamma2")}], "predict")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.config:
        raise ValidationError("config: --config is required")
    raw = _load_json(args.config)
    if args.seed_given:
        raw["seed"] = args.seed
    raw.setdefault("seed", DEFAULT_SEED)
    raw["threads"] = args.threads
    try:
        cfg = simulate.ExperimentConfig.from_dict(raw)
    except simulate.ConfigError as e:
        raise ValidationError(str(e)) from None
    res = simulate.run_experiment(cfg)
    conf = res["config"]
    conf.pop("threads", None)
    doc = {"command": "simulate", "config": conf, "seed": cfg.seed, "rows": res["rows"], "meta": res["meta"]}
    if "variance_extrapolation" in res:
        doc["variance_extrapolation"] = res["variance_extrapolation"]
    emit(args, doc, res["rows"], "simulate")
    return EXIT_OK


def _read_result(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"input: file {path!r} does not exist")
    text = p.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ValidationError(f"input: {path!r} is not a JSON result file") from None


def cmd_compare(args) -> int:
    pred = _read_result(args.predict)
    sim = _read_result(args.simulate)
    if pred.get("command") != "predict" or sim.get("command") != "simulate":
        raise ValidationError("input: expected a predict file and a simulate file")
    pc, sc = pred["config"], sim["config"]
    for key in ("mode", "dim"):
        if pc.get(key) != sc.get(key):
            raise ValidationError(f"input: {key} differs between predict and simulate")
    g1 = float(pred["gamma1"])
    rows = []
    for r in sim["rows"]:
        rel = abs(r["mean_per_volume"] - g1) / g1
        rows.append({"check": "mean", "R": r["R"], "observed": r["mean_per_volume"], "predicted": g1,
                     "rel_error": rel, "tolerance": args.tol_mean, "pass": rel <= args.tol_mean})
    if "gamma2" in pred and "variance_extrapolation" in sim:
        g2 = float(pred["gamma2"])
        obs = sim["variance_extrapolation"]["intercept"]
        rel = abs(obs - g2) / abs(g2)
        rows.append({"check": "variance_limit", "R": "extrapolated", "observed": obs, "predicted": g2,
                     "rel_error": rel, "tolerance": args.tol_var, "pass": rel <= args.tol_var})
    ok = all(r["pass"] for r in rows)
    doc = {"command": "compare", "config": {"predict": pc, "simulate": sc, "tol_mean": args.tol_mean,
                                            "tol_var": args.tol_var},
           "seed": sim.get("seed"), "verdicts": rows, "pass": ok}
    emit(args, doc, rows, "compare")
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_graphs(args) -> int:
    n = args.vertices
    if not 1 <= n <= graphs.MAX_ENUM_VERTICES:
        raise ValidationError(f"vertices: must be in 1..{graphs.MAX_ENUM_VERTICES}")
    V = list(range(1, n + 1))
    found = graphs.minimal_2ec_graphs(V)
    entries, rows = [], []
    for G in found:
        e = {"multiplicity": list(G.mult), "pairs": [list(p) for p in G.pairs]}
        if n >= 2:
            e["ears"] = [graphs._embed(G, E).tolist() for E in graphs.ear_decomposition(G)]
            e["hbl"] = graphs.hbl_exponents(G).to_json()
        entries.append(e)
        rows.append({"multiplicity": " ".join(map(str, G.mult)), "ears": len(e.get("ears", []))})
    doc = {"command": "graphs", "config": {"vertices": n}, "seed": None, "count": len(found), "graphs": entries}
    emit(args, doc, rows, "graphs")
    return EXIT_OK


class ExpField:
    """f(z) = exp(w . z) with k = 1 and all derivatives available."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)
        self.d, self.k = len(self.w), 1

    def deriv(self, alpha, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        c = float(np.prod(self.w ** np.asarray(alpha)))
        return (c * np.exp(Z @ self.w))[:, None]


def cmd_kergin(args) -> int:
    d, n = args.dim, args.points
    if not 1 <= d <= 3 or not 1 <= n <= 6:
        raise ValidationError("dim must be in 1..3 and points in 1..6")
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(-1, 1, size=(n, d))
    f = ExpField(rng.uniform(-1, 1, size=d))
    K = kergin.kergin_interpolant(f, x)
    node_err = float(np.max(np.abs(K(x)[:, 0] - f.deriv((0,) * d, x)[:, 0])))
    q = n - 1
    coef = rng.integers(-5, 6, size=(1, kergin.n_monomials(d, q))).astype(float)
    P = kergin.PolyVector(d, 1, q, coef)
    KP = kergin.kergin_interpolant(P, x)
    poly_err = float(np.max(np.abs(KP.coef - P.coef)))
    doc = {"command": "kergin", "config": {"dim": d, "points": n, "function": "exp(w.z)"}, "seed": args.seed,
           "points": x, "node_error": node_err, "polynomial_reproduction_error": poly_err,
           "interpolant": K.to_json()}
    emit(args, doc, [{"node_error": node_err, "polynomial_reproduction_error": poly_err}], "kergin")
    return EXIT_OK


def selftest_checks(seed: int, threads: int) -> List[dict]:
    """Fast property suite; every value depends only on the seed."""
    checks = []

    def add(name, value, ok):
        checks.append({"name": name, "value": value, "pass": bool(ok)})

    bells = [partitions.bell(n) for n in range(1, 7)]
    add("bell_numbers", bells, bells == [1, 2, 5, 15, 52, 203])
    ground = (1, 2, 3, 4)
    rng = np.random.default_rng(seed)
    mom = partitions.SubsetIndexedValues.from_function(
        ground, lambda S: Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 7))))
    back = partitions.cumulants_to_moments(partitions.moments_to_cumulants(mom))
    add("cumulant_round_trip", True, all(back[m] == mom[m] for m in mom))
    g3 = sorted(tuple(G.mult) for G in graphs.minimal_2ec_graphs([1, 2, 3]))
    add("minimal_2ec_three_vertices", g3, g3 == [(0, 2, 2), (1, 1, 1), (2, 0, 2), (2, 2, 0)])
    fin = clusters.finest_clustering([[-1.0], [0.0], [3.0], [6.0]], 2.0)
    add("finest_clustering", fin.serialize(), fin.serialize() == "{{1,2},{3},{4}}")
    errs = []
    for i in range(5):
        d, n = 1 + i % 3, 2 + i % 3
        x = rng.integers(-4, 5, size=(n, d)).astype(object)
        while len({tuple(r) for r in x}) < n:
            x = rng.integers(-4, 5, size=(n, d)).astype(object)
        x = np.vectorize(Fraction)(x)
        coef = np.vectorize(Fraction)(rng.integers(-5, 6, size=(1, kergin.n_monomials(d, n - 1))).astype(object))
        P = kergin.PolyVector(d, 1, n - 1, coef)
        errs.append(kergin.kergin_interpolant(P, x, exact=True).equals(P))
    add("kergin_exact_reproduction", all(errs), all(errs))
    from .gaussian import bargmann_fock
    bf1 = bargmann_fock(1, 1)
    g = kacrice.gamma1(bf1).value
    add("gamma1_zeros_1d", g, abs(g - 1 / math.pi) < 1e-9)
    g = kacrice.gamma1(bargmann_fock(2, 1)).value
    add("gamma1_length_2d", g, abs(g - 0.5) < 1e-9)
    g = kacrice.gamma1(GradientKernel(bf1)).value
    add("gamma1_critical_1d", g, abs(g - math.sqrt(3) / math.pi) < 1e-9)
    x = np.array([[0.0], [1.2]])
    direct = kacrice.rho_A(bf1, x, mc_samples=20000, seed=seed)
    fact = kacrice.rho_A_factorized(bf1, x, partitions.singletons((1, 2)), mc_samples=20000, seed=seed + 1)
    z = abs(direct.value - fact.value) / math.hypot(direct.stderr, fact.stderr)
    add("factorization_rho2", [direct.value, fact.value], z < 4)
    vals = simulate.simulate_statistic(bf1, "zeros", 20.0, 64, seed, 0.1, True, chunk=16, threads=threads)
    add("zeros_mean_t20", float(vals.mean()), abs(vals.mean() / 20 - 1 / math.pi) < 0.05)
    return checks


def cmd_selftest(args) -> int:
    checks = selftest_checks(args.seed, args.threads)
    ok = all(c["pass"] for c in checks)
    doc = {"command": "selftest", "config": {"suite": "fast"}, "seed": args.seed, "checks": checks, "pass": ok}
    emit(args, doc, checks, "selftest")
    return EXIT_OK if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------
# parser

def _positive_int(s):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _seed(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=_seed, default=None)
    common.add_argument("--out", help="directory for the result file")
    common.add_argument("--threads", type=_positive_int, default=int(os.environ.get(THREADS_ENV, "1")))
    common.add_argument("--format", choices=["json", "csv"], default="json")
    p = argparse.ArgumentParser(prog="artifact", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("predict", parents=[common], help="limit constants and density tables")
    sp.add_argument("--kernel", default="bargmann-fock")
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--mode", default="zeros")
    sp.add_argument("--mc-samples", type=_positive_int, default=20000)
    sp.add_argument("--gamma2", action="store_true", help="also compute gamma_2 in dimension 2")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo experiment")
    sp = sub.add_parser("compare", parents=[common], help="verdicts from predict and simulate outputs")
    sp.add_argument("--predict", required=True)
    sp.add_argument("--simulate", required=True)
    sp.add_argument("--tol-mean", type=float, default=0.03)
    sp.add_argument("--tol-var", type=float, default=0.10)
    sp = sub.add_parser("graphs", parents=[common], help="minimal 2-edge-connected multigraphs")
    sp.add_argument("--vertices", type=int, default=3)
    sp = sub.add_parser("kergin", parents=[common], help="interpolate a builtin test function")
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--points", type=int, default=3)
    sub.add_parser("selftest", parents=[common], help="fast property suite")
    return p


COMMANDS = {"predict": cmd_predict, "simulate": cmd_simulate, "compare": cmd_compare,
            "graphs": cmd_graphs, "kergin": cmd_kergin, "selftest": cmd_selftest}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK
        parser.print_usage(sys.stderr)
        print(f"artifact: unknown subcommand {argv[0] if argv else ''!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = DEFAULT_SEED
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, simulate.ConfigError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
