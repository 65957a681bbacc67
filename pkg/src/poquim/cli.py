"""Command-line front end.

Subcommands ``fit``, ``test``, ``simulate`` and ``oracle-check`` read a JSON
run configuration (``--config``).  Reports are JSON with floats written to 17
significant digits; ``simulate`` also writes a TSV table of rejection rates.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  A statistical rejection is not an error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, PoquimError
from .index_classes import classify_quadruples
from .inference import (DEFAULT_LEVELS, Hypothesis, jackknife_oneway_test, poquim_test)
from .information import EIG_TOL, acm, poquim_ml, poquim_reml
from .likelihood import FitOptions, fit_ml, fit_reml
from .model import ModelSpec, VarianceComponents, balanced_one_way, indicator, one_way, two_way_crossed
from .simulation import DistributionSpec, StudyConfig, run_study

EXIT_CODES = {ConfigError: 1, DataError: 2, NumericalError: 3}
METHOD_LABELS = {"poquim": "POQUIM", "jackknife": "Jackknife"}


# -- serialization ---------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def dumps(obj) -> str:
    """JSON text with 17-significant-digit floats and sorted keys."""

    def enc(o, indent):
        pad = "  " * (indent + 1)
        end = "  " * indent
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(k)}: {enc(v, indent + 1)}" for k, v in sorted(o.items())]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(not isinstance(v, (dict, list)) for v in o):
                return "[" + ", ".join(enc(v, indent) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, indent + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            if not math.isfinite(o):
                return json.dumps(str(o))
            txt = format(o, ".17g")
            return txt if any(c in txt for c in ".en") else txt + ".0"
        return json.dumps(o)

    return enc(_plain(obj), 0) + "\n"


def _write(text: str, out: str | None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- data ingestion --------------------------------------------------------------

def read_table(path) -> tuple[list, dict]:
    """Read a CSV with header into ``(header, {column: list of strings})``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file, missing header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or not all(header):
        raise DataError(f"{path}: header has empty or duplicate column names")
    cols = {h: [] for h in header}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for h, cell in zip(header, row):
            cols[h].append(cell.strip())
    if not rows[1:]:
        raise DataError(f"{path}: header only, no observations")
    return header, cols


def _numeric(cols, name, path):
    if name not in cols:
        raise ConfigError(f"{path}: no column named {name!r}")
    out = np.empty(len(cols[name]))
    for r, cell in enumerate(cols[name]):
        try:
            out[r] = float(cell)
        except ValueError:
            raise DataError(f"{path}: row {r + 2}, column {name!r}: cannot parse {cell!r} as a number") from None
        if not math.isfinite(out[r]):
            raise DataError(f"{path}: row {r + 2}, column {name!r}: non-finite value {cell!r}")
    return out


def build_model(cfg: dict, base: Path) -> ModelSpec:
    """Assemble the model from the ``data``, ``fixed`` and ``random`` blocks."""
    data = cfg.get("data")
    if not isinstance(data, dict) or "path" not in data or "response" not in data:
        raise ConfigError("config needs a data block with 'path' and 'response'")
    path = (base / data["path"]) if not Path(data["path"]).is_absolute() else Path(data["path"])
    _, cols = read_table(path)
    y = _numeric(cols, data["response"], path)
    N = y.size
    fixed = cfg.get("fixed", {"intercept": True})
    Xcols, xnames = [], []
    if fixed.get("intercept", True):
        Xcols.append(np.ones(N))
        xnames.append("intercept")
    for name in fixed.get("covariates", []):
        Xcols.append(_numeric(cols, name, path))
        xnames.append(name)
    if not Xcols:
        raise ConfigError("the fixed design is empty")
    terms = cfg.get("random", [])
    if not terms:
        raise ConfigError("at least one random term is required")
    Z, znames, weighted = [], [], []
    for term in terms:
        fac = term.get("factor")
        if fac not in cols:
            raise ConfigError(f"{path}: no factor column named {fac!r}")
        Zt = indicator(cols[fac])
        w = term.get("weight")
        if w is not None:
            Zt = Zt * _numeric(cols, w, path)[:, None]
        Z.append(Zt)
        znames.append(term.get("name") or (f"{fac}:{w}" if w else fac))
        weighted.append(w is not None)
    return ModelSpec(y, np.column_stack(Xcols), Z, tuple(xnames), tuple(znames), tuple(weighted))


def _fit_options(cfg):
    f = cfg.get("fit", {})
    try:
        return FitOptions(tol=float(f.get("tol", 1e-8)), max_iter=int(f.get("max_iter", 200)),
                          starts=tuple(f.get("starts", ("moment", 0.5, 2.0))))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid fit block: {exc}") from None


def _fit_report(model, cfg):
    method = cfg.get("method", "reml")
    opts = _fit_options(cfg)
    if method == "reml":
        fit = fit_reml(model, opts)
        decomp = poquim_reml(fit.theta_hat, fit.beta_hat, model)
    elif method == "ml":
        fit = fit_ml(model, opts)
        decomp = poquim_ml(fit.theta_hat, fit.beta_hat, model)
    else:
        raise ConfigError(f"unknown method {method!r}; expected 'reml' or 'ml'")
    try:
        est = acm(decomp, check_psd=False)
        ev = np.linalg.eigvalsh(est.sigma)
        acm_block = {"sigma": est.sigma, "min_eigenvalue": ev[0],
                     "psd": bool(ev[0] >= -EIG_TOL * abs(ev[-1]))}
    except NumericalError as exc:
        # a degenerate fit still gets a report; the failure is recorded in place of the ACM
        acm_block = {"error": str(exc)}
    part = classify_quadruples(model)
    report = {
        "method": method,
        "N": model.N, "p": model.p, "s": model.s,
        "fixed_names": list(model.x_names),
        "random_names": list(model.z_names),
        "theta_hat": {"lambda": fit.theta_hat.lam, "gamma": fit.theta_hat.gamma},
        "beta_hat": fit.beta_hat.beta,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "boundary": list(fit.boundary),
        "iterations": fit.iterations,
        "poquim": {"observed": decomp.observed, "estimated": decomp.estimated,
                   "total": decomp.total, "i2": decomp.i2},
        "acm": acm_block,
        "index_classes": {"L": part.L, "h": part.cardinalities,
                          "keys": [list(k.coeff) for k in part.keys]},
    }
    return fit, report


def _classes_tsv(model) -> str:
    part = classify_quadruples(model)
    s = model.s
    lines = ["class\t" + "\t".join(f"f_{t}" for t in range(s + 1)) + "\th"]
    for l, key, h in part.summary_rows():
        lines.append(f"{l}\t" + "\t".join(format(v, ".17g") for v in key) + f"\t{h}")
    return "\n".join(lines) + "\n"


# -- subcommands -------------------------------------------------------------------

def cmd_fit(cfg, base, args):
    model = build_model(cfg, base)
    _, report = _fit_report(model, cfg)
    if args.classes_tsv:
        _write(_classes_tsv(model), args.classes_tsv)
    return report


def _balanced_groups(model):
    """(m, n) layout if the model is a balanced one-way intercept-only design."""
    if model.s != 1 or model.p != 1 or not np.allclose(model.X[:, 0], 1.0):
        return None
    Z = model.Z[0]
    if not np.all((Z == 0) | (Z == 1)) or not np.all(Z.sum(axis=1) == 1):
        return None
    sizes = Z.sum(axis=0)
    if np.any(sizes != sizes[0]):
        return None
    groups = np.argmax(Z, axis=1)
    order = np.argsort(groups, kind="stable")
    return model.y[order].reshape(Z.shape[1], int(sizes[0]))


def cmd_test(cfg, base, args):
    model = build_model(cfg, base)
    h = cfg.get("hypothesis")
    if not isinstance(h, dict) or "K" not in h or "phi" not in h:
        raise ConfigError("test needs a hypothesis block with 'K' (rows) and 'phi'")
    rows = np.asarray(h["K"], dtype=float)
    if rows.ndim != 2 or rows.shape[1] != model.s + 1:
        raise ConfigError(f"each K row must have s+1 = {model.s + 1} entries")
    hyp = Hypothesis(rows.T, h["phi"])
    levels = tuple(h.get("levels", DEFAULT_LEVELS))
    if cfg.get("method", "reml") != "reml":
        raise ConfigError("dispersion tests use REML estimates; set method to 'reml'")
    fit, report = _fit_report(model, cfg)
    res, _, est = poquim_test(model, hyp, bool(h.get("null_substitution", True)),
                              _fit_options(cfg), levels, fit=fit)
    tests = {"poquim": _test_dict(res)}
    report["acm_test"] = est.sigma
    if h.get("jackknife"):
        layout = _balanced_groups(model)
        if layout is None:
            raise ConfigError("the jackknife is unsupported for this design; "
                              "it needs a balanced one-way layout with an intercept only")
        pinned = hyp.pinned_components()
        if set(pinned) != {1} or hyp.r != 1:
            raise ConfigError("the jackknife tests H0: gamma_1 = gamma0 only")
        tests["jackknife"] = _test_dict(jackknife_oneway_test(layout, pinned[1], levels=levels))
    report["tests"] = tests
    return report


def _test_dict(res):
    return {"method": res.method, "statistic": res.statistic, "df": res.df,
            "p_value": res.p_value,
            "reject_at": {format(a, "g"): d for a, d in res.reject_at.items()}}


def _study_configs(cfg, seed):
    sim = cfg.get("simulate")
    if not isinstance(sim, dict) or not sim.get("scenarios"):
        raise ConfigError("simulate needs a 'simulate' block with a list of scenarios")
    defaults = dict(sim.get("defaults", {}))
    out = []
    for i, sc in enumerate(sim["scenarios"]):
        d = dict(defaults)
        d.update(sc)
        d.setdefault("stream", i)
        d.setdefault("label", f"scenario{i + 1}")
        if seed is not None:
            d["master_seed"] = seed
        try:
            out.append(StudyConfig.from_dict(d))
        except TypeError as exc:
            raise ConfigError(f"scenario {i + 1}: {exc}") from None
    return out


def _rates_tsv(results, configs) -> str:
    labels = [c.label for c in configs]
    methods = []
    for c in configs:
        methods += [m for m in c.methods if m not in methods]
    levels = sorted({a for c in configs for a in c.levels})
    lines = ["nominal_level\tmethod\t" + "\t".join(labels)]
    for a in levels:
        for meth in methods:
            cells = []
            for r, c in zip(results, configs):
                if meth in c.methods and a in c.levels:
                    p, se = r.rate(meth, a)
                    cells.append(f"{p:.3f} ± {se:.3f}")
                else:
                    cells.append("-")
            lines.append(f"{a:g}\t{METHOD_LABELS.get(meth, meth)}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg, base, args):
    configs = _study_configs(cfg, cfg.get("seed"))
    results = [run_study(c, threads=args.threads) for c in configs]
    report = {"scenarios": [r.summary() for r in results]}
    tsv = _rates_tsv(results, configs)
    if args.out:
        _write(tsv, str(Path(args.out).with_suffix(".tsv")))
    else:
        report["table"] = tsv
    return report


def cmd_oracle_check(cfg, base, args):
    from .oracle import HigherMoments, analytic_quim_ml, analytic_quim_reml, mc_mean_with_se
    from .simulation import sample_law

    oc = cfg.get("oracle")
    if not isinstance(oc, dict):
        raise ConfigError("oracle-check needs an 'oracle' block")
    design = oc.get("design", "one-way")
    m, n = int(oc.get("m", 3)), int(oc.get("n", 2))
    model = balanced_one_way(m, n) if design == "one-way" else two_way_crossed(m, n)
    lam = float(oc.get("lam", 1.0))
    gamma = np.asarray(oc.get("gamma", [1.0] * model.s), dtype=float)
    theta = VarianceComponents(lam, gamma)
    mu = float(oc.get("mu", 1.0))
    laws = [DistributionSpec.parse(x) for x in oc.get("laws", ["normal"] * (model.s + 1))]
    if len(laws) != model.s + 1:
        raise ConfigError(f"need {model.s + 1} laws (error first)")
    reps = int(oc.get("reps", 10000))
    kind = oc.get("kind", "reml")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    s2 = theta.sigma2()
    moments = HigherMoments.from_laws(laws, s2)
    rng = np.random.default_rng(seed)
    beta = np.array([mu])
    draws = []
    for _ in range(reps):
        y = np.full(model.N, mu)
        for t, Z in enumerate(model.Z, start=1):
            y += Z @ sample_law(rng, laws[t], s2[t], Z.shape[1])
        y += sample_law(rng, laws[0], s2[0], model.N)
        mod = model.with_response(y)
        dec = (poquim_reml if kind == "reml" else poquim_ml)(theta, beta, mod)
        draws.append(dec.total)
    mean, se = mc_mean_with_se(draws)
    exact = (analytic_quim_reml(theta, moments, model) if kind == "reml"
             else analytic_quim_ml(theta, beta, moments, model))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mean - exact) / se, np.where(np.isclose(mean, exact), 0.0, np.inf))
    return {"kind": kind, "reps": reps, "analytic": exact, "mc_mean": mean, "mc_se": se,
            "z": z, "max_abs_z": float(np.max(np.abs(z))),
            "pass": bool(np.max(np.abs(z)) <= float(oc.get("z_limit", 3.0)))}


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate,
            "oracle-check": cmd_oracle_check}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="poquim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=None, help="output path (JSON); stdout if omitted")
        if name == "fit":
            p.add_argument("--classes-tsv", default=None, help="dump the index-class table here")
    return parser


def _load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _load_config(args.config)
        if "data" in cfg and "simulate" in cfg:
            raise ConfigError("a config holds either a data block or a simulate block, not both")
        if args.seed is not None:
            cfg["seed"] = args.seed
        base = Path(args.config).resolve().parent
        report = COMMANDS[args.command](cfg, base, args)
        report = {"command": args.command, "config": cfg, "seed": cfg.get("seed"), "report": report}
        _write(dumps(report), args.out)
    except PoquimError as exc:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 3)
        sys.stderr.write(f"poquim: error: {exc}\n")
        return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
