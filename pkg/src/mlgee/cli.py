"""Command-line front end.

Subcommands: ``fit`` (one estimate from a CSV), ``bootstrap`` (fit plus
cluster-bootstrap intervals), ``simulate`` (write one synthetic dataset),
and ``study`` (full Monte Carlo summary).  Every run writes a JSON result
document that embeds the fully resolved configuration, including the seed,
so any output can be reproduced from itself.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .data_model import Level, Nesting, load_dataset, serialize_dataset
from .exceptions import ConfigError, DataError, MlgeeError, NumericalError
from .formulas import parse_formula
from .gee import (
    FitConfig,
    Link,
    WeightMethod,
    WorkingCorrelation,
    fit_marginal,
)
from .inference import cluster_bootstrap
from .simulate import builtin_scenarios, generate_dataset, get_scenario, run_study

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_schema(text):
    schema = {}
    if not text:
        return schema
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"bad schema entry {part!r}; use role=column")
        role, _, col = part.partition("=")
        schema[role.strip()] = col.strip()
    return schema


def _resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("MLGEE_SEED")
    if env is not None:
        return int(env)
    return 0


def _correlation(args):
    name = args.corr
    if name == "ind":
        return WorkingCorrelation.independence()
    if name == "exch":
        return WorkingCorrelation.exchangeable()
    if name == "block":
        return WorkingCorrelation.block()
    raise ConfigError(f"unknown correlation {name!r}")


def _fit_config(args, nesting):
    method = WeightMethod(args.method)
    group_level = Level.SUBCLUSTER if nesting is Nesting.THREE_LEVEL \
        else Level.CLUSTER
    individual = tuple(parse_formula(t, Level.INDIVIDUAL)
                       for t in (args.ps_individual or ()))
    cluster = tuple(parse_formula(t, group_level)
                    for t in (args.ps_cluster or ()))
    ipw_formula = parse_formula(args.ipw_formula, Level.INDIVIDUAL) \
        if args.ipw_formula else None
    config = FitConfig(
        method=method,
        link=Link(args.link),
        correlation=_correlation(args),
        individual_formulas=individual,
        cluster_formulas=cluster,
        ipw_formula=ipw_formula,
        use_em=args.em,
    )
    config.validate()
    return config


def _config_payload(args, seed, extra=None):
    payload = {k: v for k, v in vars(args).items()
               if k not in ("func",) and v is not None}
    payload["seed"] = seed
    if extra:
        payload.update(extra)
    return payload


def _fit_payload(fit):
    return {
        "beta": [float(b) for b in fit.beta],
        "intercept": fit.intercept,
        "effect": fit.effect,
        "score_norm": fit.score_norm,
        "iterations": fit.iterations,
        "alpha": None if fit.alpha is None else list(fit.alpha),
        "n_clusters_used": fit.n_clusters_used,
        "weight_diagnostics": fit.weight_diagnostics,
        "solver_diagnostics": {k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in fit.extras.items()},
    }


def _write_json(payload, path):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load(args):
    nesting = Nesting.THREE_LEVEL if args.levels == 3 else Nesting.TWO_LEVEL
    schema = _parse_schema(args.schema)
    schema.setdefault("treatment", args.treatment or "A")
    schema.setdefault("outcome", args.outcome or "Y")
    return load_dataset(args.data, schema, nesting), nesting


def cmd_fit(args):
    ds, nesting = _load(args)
    config = _fit_config(args, nesting)
    fit = fit_marginal(ds, config)
    seed = _resolve_seed(args)
    payload = {
        "command": "fit",
        "config": _config_payload(args, seed),
        "result": _fit_payload(fit),
    }
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_bootstrap(args):
    ds, nesting = _load(args)
    config = _fit_config(args, nesting)
    seed = _resolve_seed(args)
    boot = cluster_bootstrap(ds, config, args.bootstrap, seed,
                             threads=args.threads)
    payload = {
        "command": "bootstrap",
        "config": _config_payload(args, seed),
        "result": _fit_payload(boot.point),
        "bootstrap": {
            "replicates": boot.n_replicates,
            "n_failed": boot.n_failed,
            "unreliable": boot.unreliable,
            "se": [float(s) for s in boot.se],
            "ci_normal": boot.ci_normal.tolist(),
            "ci_percentile": boot.ci_percentile.tolist(),
        },
    }
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_simulate(args):
    sc = get_scenario(args.scenario)
    seed = _resolve_seed(args)
    ds = generate_dataset(sc, seed)
    text = serialize_dataset(ds, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_study(args):
    sc = get_scenario(args.scenario)
    seed = _resolve_seed(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    summary = run_study(sc, methods, args.reps, args.bootstrap, seed,
                        threads=args.threads)
    csv_path = args.out or f"study-{sc.name}.csv"
    csv_text = summary.to_csv(csv_path)
    payload = {
        "command": "study",
        "config": _config_payload(args, seed, {"csv": csv_path}),
        "result": {
            "scenario": summary.scenario,
            "n_replicates": summary.n_replicates,
            "bootstrap_replicates": summary.bootstrap_replicates,
            "misclassification_match_rate":
                summary.misclassification_match_rate,
            "n_failed": summary.n_failed,
            "rows": [
                {"method": r.method, "bias": r.bias,
                 "empirical_se": r.empirical_se,
                 "mean_estimated_se": r.mean_estimated_se,
                 "coverage": r.coverage}
                for r in summary.rows
            ],
        },
    }
    json_path = csv_path + ".json" if args.out else None
    _write_json(payload, json_path)
    if json_path is None:
        sys.stdout.write(csv_text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlgee",
        description="Marginal treatment-effect estimation for cluster trials "
                    "with multi-level missing outcomes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", required=True, help="input CSV path")
        p.add_argument("--schema", default="",
                       help="role=column pairs, e.g. "
                            "'treatment=arm,outcome=y,cluster=site'")
        p.add_argument("--treatment", help="treatment column (schema shortcut)")
        p.add_argument("--outcome", help="outcome column (schema shortcut)")
        p.add_argument("--levels", type=int, choices=(2, 3), default=2,
                       help="nesting depth of the data")

    def add_model_flags(p):
        p.add_argument("--method", required=True,
                       choices=[m.value for m in WeightMethod])
        p.add_argument("--link", choices=[l.value for l in Link],
                       default="identity")
        p.add_argument("--corr", choices=["ind", "exch", "block"],
                       default="exch")
        p.add_argument("--ps-individual", action="append", metavar="FORMULA",
                       help="individual-level model (repeatable)")
        p.add_argument("--ps-cluster", action="append", metavar="FORMULA",
                       help="(sub)cluster-level model (repeatable)")
        p.add_argument("--ipw-formula", metavar="FORMULA",
                       help="unconditional observation model for --method ipw")
        em = p.add_mutually_exclusive_group()
        em.add_argument("--em", dest="em", action="store_true", default=True,
                        help="correct misclassified group indicators "
                             "(default)")
        em.add_argument("--no-em", dest="em", action="store_false")

    p_fit = sub.add_parser("fit", help="one estimate from a CSV")
    add_data_flags(p_fit)
    add_model_flags(p_fit)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--out", help="write the JSON result here")
    p_fit.set_defaults(func=cmd_fit)

    p_boot = sub.add_parser("bootstrap",
                            help="fit plus cluster-bootstrap intervals")
    add_data_flags(p_boot)
    add_model_flags(p_boot)
    p_boot.add_argument("--bootstrap", type=int, default=100, metavar="B",
                        help="bootstrap replicates (default 100)")
    p_boot.add_argument("--seed", type=int)
    p_boot.add_argument("--threads", type=int, default=1)
    p_boot.add_argument("--out", help="write the JSON result here")
    p_boot.set_defaults(func=cmd_bootstrap)

    scenario_names = [s.name for s in builtin_scenarios()]
    p_sim = sub.add_parser("simulate", help="write one synthetic dataset CSV")
    p_sim.add_argument("--scenario", required=True, choices=scenario_names)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--out", help="output CSV path (default: stdout)")
    p_sim.set_defaults(func=cmd_simulate)

    p_study = sub.add_parser("study", help="Monte Carlo bias/coverage study")
    p_study.add_argument("--scenario", required=True, choices=scenario_names)
    p_study.add_argument("--reps", type=int, required=True)
    p_study.add_argument("--methods", default="cc,ipw,mipw-em,mmr",
                         help="comma-separated method tokens")
    p_study.add_argument("--bootstrap", type=int, default=100, metavar="B")
    p_study.add_argument("--seed", type=int)
    p_study.add_argument("--threads", type=int,
                         default=os.cpu_count() or 1)
    p_study.add_argument("--out", help="output CSV path")
    p_study.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except MlgeeError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
