"""Command-line entry point: generate data, train, run restart studies, CV, evaluate.

Exit codes: 0 on success, 1 on usage or validation errors, 2 on numeric
failures (inference width cap, zero-likelihood instances).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .continuation import ContinuationConfig, run_continuation
from .data import DataError, PriorSpec, load_csv, write_csv
from .em import percentile_below, random_restarts, run_em, run_mean_field_em
from .ibem import ZeroLikelihoodError
from .inference import DEFAULT_WIDTH_CAP, InferenceWidthError, StateSpaceError, log_marginals
from .model import (
    ModelError,
    format_cpts,
    format_structure,
    hierarchy,
    load_model,
    load_structure,
    naive_bayes,
    random_model,
    sample_dataset,
    save_model,
)
from .selection import cross_validate_gamma, final_fit


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Option:
    type: type
    default: object
    check: object  # predicate on the value
    rule: str
    help: str


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 <= x <= 1


OPTIONS = {
    "seed": Option(int, 0, _nonneg, ">= 0", "RNG seed"),
    "epsilon": Option(float, 0.01, _pos, "> 0", "expected change of I(T;Y) per step"),
    "gamma_step_min": Option(float, 1e-4, _pos, "> 0", "smallest gamma step"),
    "gamma_step_max": Option(float, 0.05, _pos, "> 0", "largest gamma step"),
    "inner_tol": Option(float, 1e-6, _pos, "> 0", "fix-point residual tolerance"),
    "perturb_magnitude": Option(float, 0.05, _nonneg, ">= 0", "log-scale perturbation size"),
    "gamma_stop": Option(float, 1.0, _unit, "in [0, 1]", "final gamma"),
    "max_inner_rounds": Option(int, 5000, _pos, "> 0", "round cap per fix-point solve"),
    "jitter": Option(float, 1e-3, _nonneg, ">= 0", "symmetry-breaking jitter of the start"),
    "dead_mass": Option(float, 1e-3, lambda x: 0 <= x < 1, "in [0, 1)",
                        "margin below which a state is re-seeded before perturbing (0: never)"),
    "pseudo_count": Option(float, 1.0, _nonneg, ">= 0", "prior pseudo-count per CPT row"),
    "tol": Option(float, 1e-6, _pos, "> 0", "EM objective change tolerance"),
    "max_iters": Option(int, 500, _pos, "> 0", "EM iteration cap"),
    "width_cap": Option(int, DEFAULT_WIDTH_CAP, _pos, "> 0", "largest induced width (clique size - 1) allowed"),
    "workers": Option(int, 0, _nonneg, ">= 0", "worker processes (0: all CPUs)"),
}

CONTINUATION_KEYS = ("epsilon", "gamma_step_min", "gamma_step_max", "inner_tol",
                     "perturb_magnitude", "seed", "gamma_stop", "max_inner_rounds", "jitter",
                     "dead_mass")


def _add_options(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        opt = OPTIONS[key]
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=opt.type, default=None,
                       help=f"{opt.help} (default {opt.default})")


def read_config(path) -> dict:
    """Parse a ``key = value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = OPTIONS[key].type(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve(args: argparse.Namespace, keys) -> dict:
    """Flag beats config file beats built-in default; every value is range-checked."""
    from_file = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        opt = OPTIONS[key]
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, opt.default)
        if isinstance(value, float) and not math.isfinite(value):
            raise UsageError(f"{key} must be finite")
        if not opt.check(value):
            raise UsageError(f"{key} must be {opt.rule}, got {value}")
        out[key] = value
    if out.get("workers", 1) == 0:
        out["workers"] = os.cpu_count() or 1
    return out


def _continuation_config(vals: dict) -> ContinuationConfig:
    try:
        return ContinuationConfig(**{k: vals[k] for k in CONTINUATION_KEYS})
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _mean_ll(model, data, width_cap) -> float:
    return float(np.mean(log_marginals(model, data.for_structure(model.structure), width_cap)))


# ---------------------------------------------------------------------------
# commands


def cmd_preset(args) -> None:
    if args.kind == "naive-bayes":
        if args.leaves is None or args.leaves < 1:
            raise UsageError("--leaves must be >= 1")
        structure = naive_bayes(args.leaves, args.card, args.leaf_card)
    else:
        if args.levels not in (3, 4):
            raise UsageError("--levels must be 3 or 4")
        structure = hierarchy(args.levels, args.card, leaf_card=args.leaf_card)
    _write(args.out, format_structure(structure))
    print(f"wrote {args.out}: {len(structure.variables)} variables, "
          f"{len(structure.hidden)} hidden")


def cmd_random_model(args) -> None:
    vals = resolve(args, ("seed",))
    if not args.concentration > 0:
        raise UsageError("--concentration must be > 0")
    structure = load_structure(args.structure)
    model = random_model(structure, vals["seed"], args.concentration)
    _write(args.out, format_cpts(model))
    print(f"wrote {args.out} seed={vals['seed']}")


def cmd_generate(args) -> None:
    vals = resolve(args, ("seed",))
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    model = load_model(args.structure, args.cpts)
    data = sample_dataset(model, args.count, vals["seed"])
    write_csv(data, args.out)
    print(f"wrote {args.out}: {args.count} rows seed={vals['seed']}")


TRAIN_KEYS = CONTINUATION_KEYS + ("pseudo_count", "tol", "max_iters", "width_cap")


def cmd_train(args) -> None:
    vals = resolve(args, TRAIN_KEYS)
    structure = load_structure(args.structure)
    data = load_csv(args.data, structure)
    heldout = load_csv(args.heldout, structure) if args.heldout else None
    prior = PriorSpec(vals["pseudo_count"])
    config = _continuation_config(vals)
    start = time.perf_counter()
    if args.method == "em":
        fit = run_em(structure, data, vals["seed"], prior, vals["tol"], vals["max_iters"],
                     vals["width_cap"])
    elif args.method == "mfem":
        fit = run_mean_field_em(structure, data, vals["seed"], prior, vals["tol"],
                                vals["max_iters"], vals["width_cap"])
    else:
        fit = run_continuation(structure, data, config, prior, heldout, vals["width_cap"])
    elapsed = time.perf_counter() - start
    prefix = Path(args.out)
    save_model(fit.model, f"{prefix}.structure", f"{prefix}.cpts")
    _write(f"{prefix}.trace.tsv", fit.trace.to_tsv())
    last = fit.trace[-1]
    line = (f"method={args.method} seed={vals['seed']} train_ll={fit.train_ll:.9f} "
            f"info={last.info:.9g} gamma={last.gamma:.9g} iterations={fit.iterations} "
            f"converged={int(fit.converged)} time={elapsed:.2f}s")
    if heldout is not None:
        line += f" heldout_ll={_mean_ll(fit.model, heldout, vals['width_cap']):.9f}"
    print(line)


def cmd_restarts(args) -> None:
    vals = resolve(args, ("seed", "pseudo_count", "tol", "max_iters", "width_cap", "workers"))
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    structure = load_structure(args.structure)
    data = load_csv(args.data, structure)
    test = load_csv(args.test, structure) if args.test else None
    runs = random_restarts(structure, data, args.n, vals["seed"], PriorSpec(vals["pseudo_count"]),
                           vals["tol"], vals["max_iters"], args.method, vals["workers"])
    lines = ["rank\trun_seed\ttrain_ll\ttest_ll"]
    for rank, fit in enumerate(runs, start=1):
        test_ll = _mean_ll(fit.model, test, vals["width_cap"]) if test else math.nan
        seed = ",".join(str(s) for s in fit.seed)
        lines.append(f"{rank}\t{seed}\t{fit.train_ll:.9f}\t{test_ll:.9f}")
    table = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, table)
    else:
        sys.stdout.write(table)
    summary = f"restarts n={args.n} seed={vals['seed']} best_train_ll={runs[0].train_ll:.9f}"
    if args.reference is not None:
        pct = percentile_below([r.train_ll for r in runs], args.reference)
        summary += f" reference={args.reference:.9f} percentile_below={pct:.1f}%"
    print(summary)


def cmd_cv(args) -> None:
    vals = resolve(args, CONTINUATION_KEYS + ("pseudo_count", "width_cap", "workers"))
    structure = load_structure(args.structure)
    data = load_csv(args.data, structure)
    if args.k < 2:
        raise UsageError("--k must be >= 2")
    if args.k > data.M:
        raise UsageError(f"--k={args.k} exceeds the number of instances ({data.M})")
    prior = PriorSpec(vals["pseudo_count"])
    config = _continuation_config(vals)
    curve = cross_validate_gamma(structure, data, args.k, config, prior, vals["seed"],
                                 vals["workers"], vals["width_cap"])
    prefix = Path(args.out)
    _write(f"{prefix}.cv.tsv", curve.to_tsv())
    if curve.gamma_star > 0:
        fit = final_fit(structure, data, curve.gamma_star, config, prior,
                        width_cap=vals["width_cap"])
    else:
        fit = run_continuation(structure, data, replace(config, gamma_stop=0.0), prior,
                               width_cap=vals["width_cap"])
    save_model(fit.model, f"{prefix}.structure", f"{prefix}.cpts")
    _write(f"{prefix}.trace.tsv", fit.trace.to_tsv())
    print(f"cv k={args.k} seed={vals['seed']} gamma_star={curve.gamma_star:.9g} "
          f"cv_ll={curve.mean[curve.best_index]:.9f} final_train_ll={fit.train_ll:.9f}")


def cmd_eval(args) -> None:
    vals = resolve(args, ("width_cap",))
    model = load_model(args.structure, args.cpts)
    data = load_csv(args.data, model.structure)
    print(f"test_ll={_mean_ll(model, data, vals['width_cap']):.9f} instances={data.M}")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bottleneck-em", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key=value file; flags take precedence")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("preset", cmd_preset, "write a built-in structure file")
    sp.add_argument("kind", choices=["naive-bayes", "hierarchy"])
    sp.add_argument("--leaves", type=int, help="observed leaves (naive-bayes)")
    sp.add_argument("--levels", type=int, default=3, help="hidden levels: 3 or 4 (hierarchy)")
    sp.add_argument("--card", type=int, required=True, help="hidden cardinality")
    sp.add_argument("--leaf-card", type=int, default=2, help="leaf cardinality")
    sp.add_argument("--out", required=True)

    sp = command("random-model", cmd_random_model, "draw random CPTs for a structure")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--concentration", type=float, default=1.0, help="Dirichlet concentration")
    sp.add_argument("--out", required=True, help="CPT file to write")
    _add_options(sp, ("seed",))

    sp = command("generate", cmd_generate, "sample a CSV dataset from a model")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--cpts", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    _add_options(sp, ("seed",))

    sp = command("train", cmd_train, "fit parameters with em, mfem or ibem")
    sp.add_argument("--method", choices=["em", "mfem", "ibem"], required=True)
    sp.add_argument("--structure", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--heldout", help="CSV scored at every continuation step and at the end")
    sp.add_argument("--out", required=True, help="output prefix")
    _add_options(sp, TRAIN_KEYS)

    sp = command("restarts", cmd_restarts, "random-restart study, best run first")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", help="CSV to score each run on")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--method", choices=["em", "mfem"], default="em")
    sp.add_argument("--reference", type=float, help="train LL to rank against the runs")
    sp.add_argument("--out", help="write the table here instead of stdout")
    _add_options(sp, ("seed", "pseudo_count", "tol", "max_iters", "width_cap", "workers"))

    sp = command("cv", cmd_cv, "cross-validate gamma, then fit all data up to gamma_star")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out", required=True, help="output prefix")
    _add_options(sp, CONTINUATION_KEYS + ("pseudo_count", "width_cap", "workers"))

    sp = command("eval", cmd_eval, "average log-likelihood per instance of a CSV")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--cpts", required=True)
    sp.add_argument("--data", required=True)
    _add_options(sp, ("width_cap",))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (UsageError, ModelError, DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InferenceWidthError, StateSpaceError, ZeroLikelihoodError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
