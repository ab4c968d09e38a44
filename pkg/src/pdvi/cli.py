"""Command-line runner: generate data, run optimizers, compare runs.

Subcommands::

    pdvi gen          --preset NAME [--seed S,...] [--out DIR]
    pdvi run          [--config FILE] [--preset NAME] [--optimizer NAME] ...
    pdvi compare      [--config FILE ...] [--optimizer A,B] ...
    pdvi print-config [--config FILE] [flags]

Exit codes: 0 success, 1 a run aborted, 2 configuration error,
3 data or file error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baselines import METHODS as BASELINES
from .baselines import BaselineConfig, run_baseline
from .core import ConfigurationError
from .data import PRESETS, TableFormatError, load_quadratic, load_table, save_quadratic, save_table
from .experiments import TUNED, build_experiment, generate_data, resolve_preset
from .metrics import (
    MIXTURE_W2_DEFINITION,
    GaussianMixtureSummary,
    adjusted_rand_index,
    mixture_w2_matched,
    variational_mixture,
)
from .objectives.quadratic import QuadraticInstance
from .solver import TRACE_COLUMNS, SolveConfig, SolverAborted, run
from .subsolver import InnerSolverConfig

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ABORT, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
OPTIMIZERS = ("pdvi", "p2dvi") + BASELINES
OBJECTIVES = ("quadratic", "gmm", "spatial")

DEFAULTS = {
    "objective": None,  # taken from the preset when unset
    "preset": "gmm-desk",
    "dataset": None,  # table written by `gen`; replaces the generated data
    "optimizer": "p2dvi",
    "seeds": [0],
    "output_dir": "runs",
    "data": {"batch_size": None, "bias": None},
    "solver": {
        "eta": None,  # float or one value per block; overrides eta_rule
        "eta_rule": None,  # uniform | inv-lipschitz; default follows the optimizer
        "c": None,  # step constant; preset value when unset
        "iters": None,
        "inner_method": "auto",
        "inner_tol": 1e-6,
        "max_inner_iters": 200,
        "line_search": "backtracking",
        "trace_every": 1,
        "stop_grad_tol": 0.0,
        "stop_objective": None,
    },
    "baseline": {
        "step": None,
        "diminish": None,  # [a, b]; defaults to [step, 0.01]
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "decay": 0.9,
    },
}

_NUMBER = (int, float)
_SCHEMA = {
    "objective": (str, type(None)), "preset": str, "dataset": (str, type(None)),
    "optimizer": str, "seeds": list, "output_dir": str,
    "data.batch_size": (int, type(None)), "data.bias": (*_NUMBER, type(None)),
    "solver.eta": (*_NUMBER, list, type(None)), "solver.eta_rule": (str, type(None)),
    "solver.c": (*_NUMBER, type(None)), "solver.iters": (int, type(None)),
    "solver.inner_method": str, "solver.inner_tol": _NUMBER, "solver.max_inner_iters": int,
    "solver.line_search": str, "solver.trace_every": int, "solver.stop_grad_tol": _NUMBER,
    "solver.stop_objective": (*_NUMBER, type(None)),
    "baseline.step": (*_NUMBER, list, type(None)), "baseline.diminish": (list, type(None)),
    "baseline.beta1": _NUMBER, "baseline.beta2": _NUMBER, "baseline.eps": _NUMBER,
    "baseline.decay": _NUMBER,
}


class ConfigError(ConfigurationError):
    pass


# -- configuration -------------------------------------------------------------------

def _walk(node, prefix, where, out):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{where}:{node.start_mark.line + 1}: expected a mapping")
    for key_node, value_node in node.value:
        key = f"{prefix}{key_node.value}"
        line = key_node.start_mark.line + 1
        if key in ("data", "solver", "baseline"):
            _walk(value_node, key + ".", where, out)
        elif key not in _SCHEMA:
            raise ConfigError(f"{where}:{line}: unknown field '{key}'")
        else:
            out[key] = line


def load_config(path) -> dict:
    """Read a YAML config and merge it over the defaults, with line diagnostics."""
    where = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{where}: cannot read config ({exc.strerror})") from None
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark else ""
        raise ConfigError(f"{where}{line}: {getattr(exc, 'problem', exc)}") from None
    lines = {}
    if node is not None:
        _walk(node, "", where, lines)
    cfg = copy.deepcopy(DEFAULTS)
    for key, line in lines.items():
        value = raw
        for part in key.split("."):
            value = value[part]
        _check_field(key, value, f"{where}:{line}")
        _set(cfg, key, value)
    return cfg


def _set(cfg, key, value):
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        target = target[p]
    target[parts[-1]] = value


def _check_field(key, value, where):
    expected = _SCHEMA[key]
    if isinstance(value, bool) or not isinstance(value, expected):
        names = expected if isinstance(expected, tuple) else (expected,)
        names = " or ".join("null" if t is type(None) else t.__name__ for t in names)
        raise ConfigError(f"{where}: field '{key}' expects {names}, got {value!r}")


def _parse_list(text, cast, flag):
    try:
        return [cast(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: cannot parse {text!r}") from None


def apply_flags(cfg, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "preset", None):
        cfg["preset"] = args.preset
    if getattr(args, "seed", None):
        cfg["seeds"] = _parse_list(args.seed, int, "--seed")
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    if getattr(args, "optimizer", None) and "," not in args.optimizer:
        cfg["optimizer"] = args.optimizer
    if getattr(args, "eta", None):
        etas = _parse_list(args.eta, float, "--eta")
        cfg["solver"]["eta"] = etas[0] if len(etas) == 1 else etas
    if getattr(args, "eta_rule", None):
        cfg["solver"]["eta_rule"] = args.eta_rule
    if getattr(args, "batch_size", None):
        cfg["data"]["batch_size"] = args.batch_size
    if getattr(args, "iters", None) is not None:
        cfg["solver"]["iters"] = args.iters
    return cfg


def validate(cfg) -> dict:
    """Check cross-field rules and fill preset-dependent values."""
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"field 'preset': unknown preset {cfg['preset']!r}; "
                          f"choose from {', '.join(sorted(PRESETS))}")
    kind = PRESETS[cfg["preset"]]["kind"]
    if cfg["objective"] is None:
        cfg["objective"] = kind
    elif cfg["objective"] not in OBJECTIVES:
        raise ConfigError(f"field 'objective': expected one of {OBJECTIVES}")
    elif cfg["objective"] != kind:
        raise ConfigError(f"field 'objective': preset {cfg['preset']!r} is a {kind} setup")
    if cfg["optimizer"] not in OPTIMIZERS:
        raise ConfigError(f"field 'optimizer': expected one of {', '.join(OPTIMIZERS)}")
    if not cfg["seeds"] or not all(isinstance(s, int) for s in cfg["seeds"]):
        raise ConfigError("field 'seeds': need a non-empty list of integers")
    if cfg["dataset"] is not None and not Path(cfg["dataset"]).is_file():
        raise ConfigError(f"field 'dataset': {cfg['dataset']} does not exist")
    rule = cfg["solver"]["eta_rule"]
    if rule not in (None, "uniform", "inv-lipschitz"):
        raise ConfigError("field 'solver.eta_rule': expected uniform or inv-lipschitz")
    if cfg["optimizer"] == "pdvi" and rule == "inv-lipschitz":
        raise ConfigError("field 'solver.eta_rule': pdvi uses one uniform step; use p2dvi")
    if cfg["solver"]["inner_method"] not in ("auto", "closed_form", "block_coordinate_descent",
                                             "gradient_descent"):
        raise ConfigError("field 'solver.inner_method': unknown method")
    settings = TUNED.get(cfg["preset"], {})
    if cfg["solver"]["iters"] is None:
        cfg["solver"]["iters"] = settings.get("iters", 1000)
    if cfg["solver"]["c"] is None:
        cfg["solver"]["c"] = settings.get("c", 0.5)
    if cfg["baseline"]["step"] is None:
        cfg["baseline"]["step"] = settings.get("baseline_step", 0.01)
    if cfg["solver"]["iters"] < 0:
        raise ConfigError("field 'solver.iters': must be non-negative")
    return cfg


def resolve_config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else copy.deepcopy(DEFAULTS)
    return validate(apply_flags(cfg, args))


# -- running ----------------------------------------------------------------------------

def _load_dataset(cfg):
    if cfg["dataset"] is None:
        return None
    if cfg["objective"] == "quadratic":
        return load_quadratic(cfg["dataset"])
    ds = load_table(cfg["dataset"])
    sidecar = Path(cfg["dataset"]).with_suffix(".meta.yaml")
    if sidecar.is_file():  # written by `gen`; restores the generating mixture for W2
        try:
            mix = (yaml.safe_load(sidecar.read_text(encoding="utf-8")) or {}).get("true_mixture")
        except yaml.YAMLError as exc:
            raise TableFormatError(f"{sidecar}: {exc}") from None
        if mix is not None:
            ds.true_mixture = GaussianMixtureSummary(mix["weights"], mix["means"], mix["variances"])
    return ds


def make_experiment(cfg, seed, dataset=None):
    overrides = {k: v for k, v in cfg["data"].items() if v is not None}
    return build_experiment(cfg["preset"], seed=seed, dataset=dataset, **overrides)


def _inner_config(cfg, exp):
    s = cfg["solver"]
    method = s["inner_method"]
    if method == "auto":
        method = "closed_form" if exp.kind == "quadratic" else "block_coordinate_descent"
    return InnerSolverConfig(method=method, inner_tol=s["inner_tol"],
                             max_inner_iters=s["max_inner_iters"], line_search=s["line_search"])


def _preconditioner(cfg, exp):
    s = cfg["solver"]
    if s["eta"] is not None:
        return exp.preconditioner(eta=s["eta"])
    opt = cfg["optimizer"]
    rule = s["eta_rule"] or ("inv-lipschitz" if opt == "p2dvi" else "uniform")
    return exp.preconditioner("p2dvi" if rule == "inv-lipschitz" else "pdvi", c=s["c"])


def run_single(cfg, seed, dataset=None):
    """Run one seed; returns ``(trace, finals, error)``."""
    exp = make_experiment(cfg, seed, dataset)
    s, b = cfg["solver"], cfg["baseline"]
    error = None
    try:
        if cfg["optimizer"] in ("pdvi", "p2dvi"):
            conf = SolveConfig(_preconditioner(cfg, exp), exp.schedule, max_iters=s["iters"],
                               inner=_inner_config(cfg, exp), stop_grad_tol=s["stop_grad_tol"],
                               stop_objective=s["stop_objective"], trace_every=s["trace_every"])
            state, trace = run(exp.problem, conf, exp.init_lambda0)
        else:
            step = b["step"]
            conf = BaselineConfig(cfg["optimizer"], exp.schedule, step=step,
                                  diminish=tuple(b["diminish"]) if b["diminish"] else None,
                                  beta1=b["beta1"], beta2=b["beta2"], eps=b["eps"],
                                  decay=b["decay"], max_iters=s["iters"],
                                  trace_every=s["trace_every"], stop_grad_tol=s["stop_grad_tol"])
            state, trace = run_baseline(exp.problem, conf, exp.init_lambda0)
    except SolverAborted as exc:
        state, trace, error = exc.state, exc.trace, str(exc)
    finals = {"seed": seed, "status": "aborted" if error else "ok",
              "iterations": int(trace[-1].t) if trace else 0}
    if trace:
        last = trace[-1]
        finals.update(final_objective=float(last.objective),
                      grad_norm_global=float(last.grad_norm_global),
                      consensus_residual=float(last.consensus_residual),
                      wallclock_ms=float(last.wallclock_ms))
    finals.update(_quality(exp, state))
    if error:
        finals["error"] = error
    return trace, finals, error


def _quality(exp, state):
    out = {}
    if exp.kind == "quadratic" or exp.dataset is None:
        return out
    if exp.dataset.true_mixture is not None and exp.hyper is not None:
        out["w2"] = mixture_w2_matched(exp.dataset.true_mixture,
                                       variational_mixture(state.lambda0, exp.hyper))
    if exp.dataset.true_labels is not None:
        labels = exp.problem.oracle.labels(state.phi)
        out["ari"] = adjusted_rand_index(exp.dataset.true_labels, labels)
    return out


def _config_comment(cfg) -> str:
    return "# config: " + json.dumps(cfg, sort_keys=True) + "\n"


def write_trace(path, trace, cfg, seed):
    buf = io.StringIO()
    buf.write(f"# pdvi {__version__} trace, seed {seed}\n")
    buf.write(_config_comment(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([r.t, repr(float(r.objective)), repr(float(r.grad_norm_global)),
                    repr(float(r.consensus_residual)), f"{r.wallclock_ms:.3f}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_trace(path) -> dict:
    """Trace file as a dict of column arrays (comment lines skipped)."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))
    cols = {name: np.array([float(r[k]) for r in rows[1:]]) for k, name in enumerate(rows[0])}
    cols["t"] = cols["t"].astype(int)
    return cols


def _aggregate(runs):
    agg = {}
    for key in ("final_objective", "grad_norm_global", "consensus_residual", "w2", "ari",
                "iterations"):
        vals = [r[key] for r in runs if key in r]
        if vals:
            agg[key] = {"mean": float(np.mean(vals)),
                        "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    return agg


def execute(cfg, out_dir) -> tuple[list, bool]:
    """Run every seed of ``cfg`` into ``out_dir``; returns (per-seed finals, any abort)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg)
    runs, aborted = [], False
    for seed in cfg["seeds"]:
        trace, finals, error = run_single(cfg, seed, dataset)
        write_trace(out / f"trace_seed{seed}.csv", trace, cfg, seed)
        runs.append(finals)
        if error:
            aborted = True
            log.error("seed %d aborted: %s", seed, error)
        else:
            log.info("seed %d: objective %.6g after %d iterations", seed,
                     finals.get("final_objective", float("nan")), finals["iterations"])
    summary = {"pdvi_version": __version__, "config": cfg,
               "mixture_w2_definition": MIXTURE_W2_DEFINITION, "runs": runs,
               "aggregate": _aggregate(runs)}
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False), encoding="utf-8")
    return runs, aborted


# -- subcommands -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    preset = args.preset or "gmm-desk"
    if preset not in PRESETS:
        raise ConfigError(f"--preset: unknown preset {preset!r}")
    seeds = _parse_list(args.seed, int, "--seed") if args.seed else [0]
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    spec = resolve_preset(preset)
    for seed in seeds:
        data = generate_data(preset, seed)
        stem = out / f"{preset}_seed{seed}"
        meta = {"generator": "pdvi", "generator_version": __version__, "preset": preset,
                "seed": seed, "spec": _plain(spec)}
        if isinstance(data, QuadraticInstance):
            save_quadratic(data, stem.with_suffix(".csv"))
        else:
            save_table(data, stem.with_suffix(".csv"))
        if getattr(data, "true_mixture", None) is not None:
            meta["true_mixture"] = {"weights": data.true_mixture.weights.tolist(),
                                    "means": data.true_mixture.means.tolist(),
                                    "variances": data.true_mixture.variances.tolist()}
        Path(f"{stem}.meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=False),
                                             encoding="utf-8")
        print(stem.with_suffix(".csv"))
    return EXIT_OK


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    runs, aborted = execute(cfg, cfg["output_dir"])
    _print_runs(cfg["optimizer"], runs)
    return EXIT_ABORT if aborted else EXIT_OK


def _print_runs(label, runs):
    for r in runs:
        parts = [f"{label} seed={r['seed']}", r["status"]]
        for key in ("final_objective", "grad_norm_global", "w2", "ari"):
            if key in r:
                parts.append(f"{key}={r[key]:.6g}")
        print("  ".join(parts))


METRIC_SENSE = {"final_objective": -1, "grad_norm_global": -1, "w2": -1, "ari": 1}


def compare_configs(cfgs, labels, out_dir):
    """Run every config and build the paired per-seed table and win counts."""
    base = cfgs[0]
    for c in cfgs[1:]:
        for key in ("preset", "dataset", "seeds", "data"):
            if c[key] != base[key]:
                raise ConfigError(f"runs differ in '{key}' ({base[key]!r} vs {c[key]!r}); "
                                  "compare needs one dataset and seed list")
    out = Path(out_dir)
    results, aborted = {}, False
    for cfg, label in zip(cfgs, labels):
        cfg = dict(cfg, output_dir=str(out / label))
        runs, ab = execute(cfg, out / label)
        results[label] = {r["seed"]: r for r in runs}
        aborted |= ab
    metrics = [m for m in METRIC_SENSE
               if all(m in r for res in results.values() for r in res.values())]
    rows = []
    for seed in base["seeds"]:
        row = {"seed": seed}
        for label in labels:
            for m in metrics:
                row[f"{label}:{m}"] = results[label][seed][m]
        if len(labels) == 2:
            a, b = labels
            for m in metrics:
                row[f"diff:{m}"] = results[a][seed][m] - results[b][seed][m]
        rows.append(row)
    wins = {}
    for m in metrics:
        sense = METRIC_SENSE[m]
        counts = dict.fromkeys(labels, 0)
        counts["ties"] = 0
        for seed in base["seeds"]:
            vals = np.array([sense * results[l][seed][m] for l in labels])
            best = np.flatnonzero(vals == vals.max())
            if best.size == 1:
                counts[labels[best[0]]] += 1
            else:
                counts["ties"] += 1
        wins[m] = counts
    return rows, wins, aborted


def cmd_compare(args) -> int:
    cfgs, labels = [], []
    paths = args.config or []
    if paths:
        for p in paths:
            c = validate(apply_flags(load_config(p), args))
            cfgs.append(c)
            labels.append(c["optimizer"])
    else:
        names = _parse_list(args.optimizer or "p2dvi,svi_diminishing", str, "--optimizer")
        base = apply_flags(copy.deepcopy(DEFAULTS), args)
        for name in names:
            c = copy.deepcopy(base)
            c["optimizer"] = name
            cfgs.append(validate(c))
            labels.append(name)
    if len(cfgs) < 2 and not args.config:
        raise ConfigError("compare needs at least two runs")
    if len(cfgs) == 1:  # a config compared against itself
        cfgs, labels = cfgs * 2, labels * 2
    labels = [f"{l}" if labels.count(l) == 1 else f"{l}#{k}" for k, l in enumerate(labels)]
    out = Path(args.out or cfgs[0]["output_dir"])
    rows, wins, aborted = compare_configs(cfgs, labels, out)
    buf = io.StringIO()
    buf.write(_config_comment({"runs": dict(zip(labels, cfgs))}))
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(buf.getvalue(), encoding="utf-8")
    report = {"pdvi_version": __version__, "mixture_w2_definition": MIXTURE_W2_DEFINITION,
              "runs": dict(zip(labels, cfgs)),
              "per_seed": rows, "wins": wins}
    (out / "comparison.yaml").write_text(yaml.safe_dump(_plain(report), sort_keys=False),
                                         encoding="utf-8")
    print(buf.getvalue().split("\n", 1)[1], end="")
    for m, counts in wins.items():
        print(f"wins[{m}]: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_print_config(args) -> int:
    if args.config or any(getattr(args, f, None) for f in
                          ("preset", "seed", "optimizer", "eta", "eta_rule", "batch_size", "iters")):
        cfg = resolve_config(args)
    else:
        cfg = DEFAULTS
    sys.stdout.write(yaml.safe_dump(cfg, sort_keys=False))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdvi", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"pdvi {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi_config=False):
        if multi_config:
            sp.add_argument("--config", action="append", help="YAML config (repeatable)")
        else:
            sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", help="seed or comma-separated seeds")
        sp.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--optimizer", help=f"one of {', '.join(OPTIMIZERS)}")
        sp.add_argument("--eta", help="step size, or one per global block")
        sp.add_argument("--eta-rule", choices=("uniform", "inv-lipschitz"))
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--iters", type=int)

    g = sub.add_parser("gen", help="write synthetic datasets and metadata sidecars")
    g.add_argument("--preset")
    g.add_argument("--seed")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)
    r = sub.add_parser("run", help="run one optimizer over the configured seeds")
    common(r)
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="paired per-seed comparison of several runs")
    common(c, multi_config=True)
    c.set_defaults(func=cmd_compare)
    pc = sub.add_parser("print-config", help="print the default or resolved config")
    common(pc)
    pc.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TableFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
