"""Command-line interface: ``fit``, ``simulate`` and ``predict``.

Exit codes: 0 success, 1 input or configuration error, 2 a fit did not
converge (results are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .core import ClusteredDataset, FitResult, InvalidParameterError, NLQMMError, VarianceSpec
from .fitter import FitControl, fit
from .inference import cluster_bootstrap
from .model import DesignMap, PhiTerm, get_model
from .simulate import HARNESS_CONTROL, raw_csv, run_study, summarize_to_table, summary_csv

log = logging.getLogger("nlqmm")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
THREADS_ENV = "NLQMM_THREADS"


class ConfigError(NLQMMError):
    pass


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_table(path) -> dict:
    """Read a long-format CSV into columns; numeric where every value parses."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read data file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        rows = []
        for row in reader:
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            rows.append([v.strip() for v in row])
    if not rows:
        raise ConfigError(f"{path} has no data rows")
    cols = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals, dtype=object)
    return cols


def _numeric(cols, name, path):
    v = cols[name]
    if v.dtype == object:
        bad = next(i for i, s in enumerate(v) if not _is_float(s))
        raise ConfigError(f"{path}: column {name!r} is not numeric (line {bad + 2})")
    return v


def _is_float(s) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    for key in ("model", "response", "group", "covariates", "start"):
        if key not in cfg:
            raise ConfigError(f"config is missing {key!r}")
    cfg.setdefault("tau", [0.5])
    if not isinstance(cfg["tau"], list):
        cfg["tau"] = [cfg["tau"]]
    cfg.setdefault("variance", "diagonal")
    cfg.setdefault("control", {})
    cfg.setdefault("bootstrap", {})
    if isinstance(cfg["covariates"], str):
        cfg["covariates"] = [cfg["covariates"]]
    return cfg


def build_design(cfg) -> tuple:
    """Model and design map from the config's ``phi`` list (identity by default)."""
    model = get_model(cfg["model"])
    covs = list(cfg["covariates"])
    phi = cfg.get("phi")
    if phi is None:
        phi = [{} for _ in range(model.s)]
    if len(phi) != model.s:
        raise ConfigError(f"model {model.name} has {model.s} parameters but phi lists {len(phi)}")
    terms = []
    for k, t in enumerate(phi):
        t = dict(t or {})
        unknown = set(t) - {"covariates", "intercept", "random"}
        if unknown:
            raise ConfigError(f"phi[{k}] has unknown keys {sorted(unknown)}")
        names = t.get("covariates", []) or []
        for n in names:
            if n not in covs:
                raise ConfigError(f"phi[{k}] uses {n!r}, which is not listed in covariates")
        terms.append(
            PhiTerm(
                tuple(covs.index(n) for n in names),
                bool(t.get("intercept", True)),
                bool(t.get("random", False)),
            )
        )
    design = DesignMap.from_terms(terms)
    if design.q < 1:
        raise ConfigError("at least one phi component needs random: true")
    return model, design


def build_control(cfg, gamma=None) -> FitControl:
    c = dict(cfg.get("control") or {})
    kw = {}
    mapping = {"gamma": "gamma", "omega0": "omega0", "tol": "loglik_rel_tol", "max_outer": "max_outer"}
    for key, field_name in mapping.items():
        if c.get(key) is not None:
            kw[field_name] = c.pop(key)
    if c:
        raise ConfigError(f"unknown control keys {sorted(c)}")
    if gamma is not None:
        kw["gamma"] = gamma
    try:
        return FitControl(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid control: {exc}") from exc


def build_dataset(cfg, cols, path) -> ClusteredDataset:
    for name in [cfg["response"], cfg["group"], *cfg["covariates"]]:
        if name not in cols:
            raise ConfigError(f"column {name!r} not found in {path}")
    y = _numeric(cols, cfg["response"], path)
    x = np.column_stack([_numeric(cols, c, path) for c in cfg["covariates"]])
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise ConfigError(f"{path}: missing or non-finite values in the model columns")
    groups = cols[cfg["group"]]
    if groups.dtype != object:
        groups = np.array([_group_label(g) for g in groups], dtype=object)
    return ClusteredDataset.from_arrays(y, x, groups)


def _group_label(g):
    return int(g) if float(g).is_integer() else float(g)


def _threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get(THREADS_ENV)
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _tau_label(tau) -> str:
    return f"{tau:g}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    cols = read_table(args.data)
    model, design = build_design(cfg)
    data = build_dataset(cfg, cols, args.data)
    control = build_control(cfg, args.gamma)
    spec = VarianceSpec(cfg["variance"], design.q)
    start = np.asarray(cfg["start"], dtype=float)
    if start.size != design.p:
        raise ConfigError(f"start has {start.size} values but the design has {design.p} fixed effects")
    taus = args.tau if args.tau else [float(t) for t in cfg["tau"]]
    boot = dict(cfg.get("bootstrap") or {})
    B = args.boot if args.boot is not None else int(boot.get("B", 0) or 0)
    seed = args.seed if args.seed is not None else int(boot.get("seed", 0) or 0)
    threads = _threads(args.threads)
    out = Path(args.out)
    status = EXIT_OK
    for tau in taus:
        res = fit(data, model, design, spec, tau, start, control)
        doc = {
            "model": cfg["model"],
            "response": cfg["response"],
            "group": cfg["group"],
            "covariates": list(cfg["covariates"]),
            "phi": cfg.get("phi"),
            **res.to_dict(),
        }
        if B > 0:
            bs = cluster_bootstrap(
                data, model, design, spec, tau, control, B, seed, base_fit=res, threads=threads
            )
            doc["bootstrap"] = {
                "B_requested": bs.B_requested,
                "B_used": bs.B_used,
                "failures": bs.failures,
                "se": bs.se.tolist(),
                "seed": seed,
            }
        path = out / f"fit_tau{_tau_label(tau)}.json"
        write_atomic(path, json.dumps(doc, indent=2, default=_json_default) + "\n")
        print(f"tau={tau:g}: beta={np.round(res.beta, 4).tolist()} converged={res.converged} -> {path}")
        if not res.converged:
            status = EXIT_NONCONVERGED
    return status


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def cmd_simulate(args) -> int:
    control = HARNESS_CONTROL if args.gamma is None else replace(HARNESS_CONTROL, gamma=args.gamma)
    taus = args.tau if args.tau else [0.1, 0.5, 0.9]
    summary = run_study(
        [args.scenario], taus, args.reps, control,
        seed=args.seed if args.seed is not None else 1,
        centered_chisq=args.centered, threads=_threads(args.threads),
    )
    out = Path(args.out)
    write_atomic(out / "summary.csv", summary_csv(summary))
    write_atomic(out / "raw.csv", raw_csv(summary))
    table = summarize_to_table(summary)
    write_atomic(out / "table.txt", table + "\n")
    print(table)
    return EXIT_OK


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:num`` for an even grid, or comma-separated values."""
    try:
        if ":" in spec:
            a, b, n = spec.split(":")
            n = int(n)
            if n < 1:
                raise ValueError
            return np.linspace(float(a), float(b), n)
        return np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise ConfigError(f"invalid grid {spec!r}; use start:stop:num or a,b,c") from None


def predict_rows(doc: dict, grid: np.ndarray, at: dict, per_cluster: bool) -> list:
    """Rows ``(x, tau, cluster, prediction)``; cluster is empty for the u = 0 curve."""
    cfg = {"model": doc["model"], "covariates": doc["covariates"], "phi": doc.get("phi")}
    model, design = build_design(cfg)
    res = FitResult.from_dict(doc)
    covs = doc["covariates"]
    for name in at:
        if name not in covs:
            raise ConfigError(f"--at names unknown covariate {name!r}")
    X = np.zeros((grid.size, len(covs)))
    X[:, 0] = grid
    for name, v in at.items():
        X[:, covs.index(name)] = v
    F, G = design.build(X)
    curves = [("", np.zeros(design.q))]
    if per_cluster:
        curves += list(zip(res.cluster_ids, res.u_modes))
    rows = []
    for label, u in curves:
        with np.errstate(all="ignore"):
            pred = model.f(np.einsum("nsp,p->ns", F, res.beta) + np.einsum("nsq,q->ns", G, u), X)
        bad = ~np.isfinite(pred)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} predictions are not finite; written as NA", RuntimeWarning)
        for xv, pv in zip(grid, pred):
            rows.append((xv, res.tau, _label(label), pv))
    return rows


def _label(v) -> str:
    if isinstance(v, (list, tuple)):
        return "/".join(str(a) for a in v)
    return str(v)


def _fmt(v) -> str:
    return "NA" if not math.isfinite(v) else repr(float(v))


def cmd_predict(args) -> int:
    grid = parse_grid(args.grid)
    at = {}
    for item in args.at or []:
        name, _, value = item.partition("=")
        try:
            at[name] = float(value)
        except ValueError:
            raise ConfigError(f"--at expects name=value, got {item!r}") from None
    rows = []
    for path in args.fit:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read fit file {path}: {exc}") from exc
        rows.extend(predict_rows(doc, grid, at, args.per_cluster))
    lines = ["x,tau,cluster,prediction"]
    lines += [f"{_fmt(x)},{t:g},{c},{_fmt(p)}" for x, t, c, p in rows]
    write_atomic(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlqmm", description="Nonlinear quantile mixed models")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model from a CSV file and a YAML config")
    f.add_argument("--data", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--tau", type=float, nargs="+", help="override the config's tau list")
    f.add_argument("--gamma", type=float)
    f.add_argument("--boot", type=int, help="bootstrap replicates (0 disables)")
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the Monte-Carlo study for one scenario")
    s.add_argument("--scenario", type=int, required=True)
    s.add_argument("--tau", type=float, nargs="+")
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--centered", action="store_true", help="center the chi-squared errors")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("predict", help="quantile curves from stored fits")
    q.add_argument("--fit", required=True, nargs="+", help="fit JSON file(s)")
    q.add_argument("--grid", required=True, help="start:stop:num or comma-separated x values")
    q.add_argument("--at", nargs="*", help="other covariates as name=value (default 0)")
    q.add_argument("--per-cluster", action="store_true", help="add one curve per cluster")
    q.add_argument("--out", required=True, help="output CSV")
    q.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are input errors, not the non-convergence status
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NLQMMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
