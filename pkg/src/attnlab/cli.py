"""Command-line front end: ``attnlab <subcommand> [options]``.

Every subcommand is a pure function of its options and ``--seed`` and
writes UTF-8 CSV (plus a short text summary) into ``--out``.  Options can
also come from a flat ``key = value`` file given with ``--config``;
command-line flags take precedence over the file.

Exit codes: 0 on success, 2 when an embedded certificate fails (the
offending instance is written next to the outputs), 64 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import experiments as ex
from .audit import LEMMAS, lipschitz_audit
from .bounds import bound_report, layer_constants, propagation, radii
from .io import ConfigError, csv_text, dict_rows_csv, format_value, read_config, write_text
from .latent import LatentModelSpec
from .linalg import ConjugatePair
from .rng import child
from .train import TrainingDiverged, stationarity_probe
from .transformer import NormBudget, load_params, realized_norms, save_params

EXIT_OK = 0
EXIT_CERTIFICATE = 2
EXIT_USAGE = 64


class UsageError(Exception):
    """Invalid command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _norm_index(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return math.inf
    v = float(text)
    if v < 1:
        raise argparse.ArgumentTypeError("norm index must be at least 1")
    return v


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


class Outputs:
    """Collects files for one run and writes them under the output directory."""

    def __init__(self, out: str, command: str):
        self.dir = Path(out)
        self.command = command

    def path(self, suffix: str) -> Path:
        return self.dir / f"{self.command}{suffix}"

    def write(self, suffix: str, text: str) -> Path:
        return write_text(self.path(suffix), text)

    def fail(self, payload: Dict) -> int:
        path = self.path("-failure.json")
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")
        print(f"certificate failed; offending instance written to {path}", file=sys.stderr)
        return EXIT_CERTIFICATE


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [format_value(v) for v in obj.ravel()]
    if isinstance(obj, (np.floating, float)):
        return format_value(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return str(obj)


def _table_text(title: str, records: Sequence[Dict], columns: Sequence[str]) -> str:
    lines = [title, "  ".join(f"{c:>12s}" for c in columns)]
    for r in records:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(f"{v:12.6g}" if isinstance(v, float) else f"{v!s:>12s}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def _emit(out: Outputs, csv_body: str, text: str) -> None:
    out.write(".csv", csv_body)
    out.write(".txt", text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

CONVERGENCE_COLUMNS = ("L", "mechanism", "median", "q25", "q75", "seed_count")
LIMIT_COLUMNS = ("L", "h", "median", "q25", "q75", "seed_count")


def _convergence(mechanism: str):
    def run(args, out: Outputs) -> int:
        cfg = ex.ConvergenceConfig(
            Ls=tuple(args.L), seeds=args.seeds,
            model=ex.TanhModel(d_p=args.d_p, d_v=args.d_v, noise=args.noise),
            lam_coef=args.lam_coef, lam_power=args.lam_power, bandwidth=args.bandwidth,
            sm_rate=getattr(args, "sm_rate", None), workers=args.workers)
        records = ex.convergence_table(mechanism, cfg, args.seed)
        _emit(out, dict_rows_csv(records, CONVERGENCE_COLUMNS),
              _table_text(f"{mechanism} attention: error to the conditional mean", records, CONVERGENCE_COLUMNS))
        return EXIT_OK
    return run


def cmd_singlehead_limit(args, out: Outputs) -> int:
    cfg = ex.LimitConfig(Ls=tuple(args.L), seeds=args.seeds, d=args.d, identity=args.identity,
                         workers=args.workers)
    records = ex.singlehead_table(cfg, args.seed)
    _emit(out, dict_rows_csv(records, LIMIT_COLUMNS),
          _table_text("distance of CME attention to the linear oracle", records, LIMIT_COLUMNS))
    return EXIT_OK


def cmd_bound_report(args, out: Outputs) -> int:
    pair = ConjugatePair.from_r(args.r)
    if args.params:
        params = load_params(args.params)
        norms = realized_norms(params, pair)
        dims = dict(d=params.d, d_sigma=params.d_sigma, d_p=params.d_p, d_y=params.d_y)
        h = params.h
    else:
        norms = NormBudget.uniform(args.T, args.h, args.budget, pair)
        dims = dict(d=args.d, d_sigma=args.d_sigma, d_p=args.d_p, d_y=args.d_y)
        h = args.h
    rep = bound_report(norms, args.R0, n=args.n, delta=args.delta, eps=args.eps,
                       with_dudley=args.dudley, **dims)
    consts = layer_constants(norms)
    rad = radii(consts, args.R0)
    D = max(dims.values())
    checks = {"finite_constants": all(math.isfinite(rep.globals[k]) for k in ("RT", "R_trans", "log_cover"))}
    if checks["finite_constants"] and rad.R_trans > 0:
        prop = propagation(consts, rad, dims["d"], dims["d_sigma"], h, D, args.eps)
        checks["sub_bounds_within_closed_form"] = prop.total <= prop.closed_form * (1 + 1e-12)
        rep.setting["sub_bound_total"] = prop.total
        rep.setting["propagated_ratio"] = prop.propagated_ratio
    out.write(".csv", rep.to_csv())
    text = rep.to_text() + "".join(f"check {k}: {'PASS' if v else 'FAIL'}\n" for k, v in sorted(checks.items()))
    out.write(".txt", text)
    sys.stdout.write(text)
    if not all(checks.values()):
        return out.fail({"checks": checks, "globals": rep.globals, "setting": rep.setting})
    return EXIT_OK


def cmd_lipschitz_audit(args, out: Outputs) -> int:
    pair = ConjugatePair.from_r(args.r)
    lemmas = tuple(args.lemmas)
    unknown = [l for l in lemmas if l not in LEMMAS]
    if unknown:
        raise UsageError(f"unknown lemma(s): {', '.join(unknown)}")
    rep = lipschitz_audit(args.trials, args.seed, pair, lemmas)
    rows = [(r.name, r.trials, r.max_ratio, int(r.passed)) for r in rep.results]
    out.write(".csv", csv_text(("lemma", "trials", "max_ratio", "passed"), rows, [f"pair={pair.label}"]))
    text = f"Lipschitz audit, pair {pair.label}\n" + "".join(
        f"  {name:14s} trials={n:<6d} max_ratio={ratio:.12g}  {'PASS' if ok else 'FAIL'}\n"
        for name, n, ratio, ok in rows)
    out.write(".txt", text)
    sys.stdout.write(text)
    if not rep.passed:
        path = out.path("-failure.json")
        rep.dump(path)
        print(f"certificate failed; offending instance written to {path}", file=sys.stderr)
        return EXIT_CERTIFICATE
    return EXIT_OK


def cmd_train_toy(args, out: Outputs) -> int:
    _check_heads(args.d_p * args.h, args.d_p, args.h)
    cfg = ex.ToyConfig(n=args.n, n_test=args.n_test, L=args.L, d_p=args.d_p, h=args.h, d_sigma=args.d_sigma,
                       d_y=args.d_y, T=args.T, steps=args.steps, lr=args.lr)
    try:
        res = ex.train_toy(cfg, args.seed)
    except TrainingDiverged as err:
        return out.fail({"error": str(err), "diagnostics": err.diagnostics})
    result, report = res["result"], res["report"]
    probe = stationarity_probe(result.params, res["data"], res["spec"], args.probes, child(args.seed, 4))
    report.update({f"probe_{k}": v for k, v in probe.items()})
    out.write("-curve.csv", csv_text(("step", "loss"), enumerate(result.curve)))
    save_params(result.params, out.path("-params.txt"))
    keys = sorted(report)
    out.write(".csv", csv_text(("key", "value"), ((k, report[k]) for k in keys)))
    text = "train-toy report\n" + "".join(f"  {k:28s} {format_value(report[k])}\n" for k in keys)
    out.write(".txt", text)
    sys.stdout.write(text)
    checks = {
        "loss_finite": all(math.isfinite(v) for v in result.curve),
        "loss_not_increased": report["train_loss"] <= report["initial_loss"],
        "optimization_error_nonnegative": report["probe_optimization_error"] >= 0.0,
    }
    if not all(checks.values()):
        return out.fail({"checks": checks, "report": report})
    return EXIT_OK


def cmd_ssl_transfer(args, out: Outputs) -> int:
    lat = LatentModelSpec(d=args.d_token, d_c=args.d_c, d_r=args.d_r, L=args.L, noise=args.noise)
    d = lat.d_c + lat.d_r
    if d % args.d_p:
        raise UsageError(f"model width d_c + d_r = {d} must be a multiple of d_p = {args.d_p}")
    cfg = ex.TransferConfig(latent=lat, n_pretrain=args.n_pretrain, n_downstream=args.n_downstream,
                            n_test=args.n_test, d_p=args.d_p, target_scale=args.target_scale,
                            pretrain_steps=args.pretrain_steps, downstream_steps=args.downstream_steps,
                            lr=args.lr, kernel=args.kernel)
    columns = ("seed_index", "pretrain_loss", "downstream_train_mse", "downstream_test_mse_pretrained",
               "downstream_test_mse_random", "transfer_advantage", "mu", "frozen_ok")

    def one(s: int):
        return {"seed_index": s, **ex.ssl_transfer(cfg, child(args.seed, s))["report"]}

    records = ex.run_trials(one, args.seeds, args.workers)
    pre = float(np.median([r["downstream_test_mse_pretrained"] for r in records]))
    rnd = float(np.median([r["downstream_test_mse_random"] for r in records]))
    comments = [f"median_pretrained={format_value(pre)}", f"median_random={format_value(rnd)}"]
    text = _table_text("SSL transfer", records, columns) + \
        f"median downstream test MSE: pretrained {pre:.6g}, random {rnd:.6g}\n"
    _emit(out, dict_rows_csv(records, columns, comments), text)
    bad = [r for r in records if r["frozen_ok"] != 1.0]
    if bad:
        return out.fail({"frozen_violations": bad})
    return EXIT_OK


def cmd_kde_check(args, out: Outputs) -> int:
    kde = ex.kde_check(args.queries, args.n_mc, args.temperature, args.d, args.L, child(args.seed, 0))
    sph = ex.sphere_lemma_check(args.d, args.n_mc, args.temperature, 2, child(args.seed, 1))
    rows = [("kde", i, kde.C[i], kde.C_se[i], kde.orth[i], kde.orth_se[i]) for i in range(len(kde.C))]
    rows += [("sphere", i, sph.coefficients[i], sph.coefficient_se[i], sph.residuals[i], sph.residual_se[i])
             for i in range(len(sph.coefficients))]
    comments = [f"kde_spread={format_value(kde.spread)}", f"kde_pooled_rel_se={format_value(kde.pooled_rel_se)}"]
    out.write(".csv", csv_text(("check", "index", "coefficient", "coefficient_se", "orthogonal", "orthogonal_se"),
                               rows, comments))
    text = (f"KDE mean vs softmax attention: spread {kde.spread:.6g}, pooled relative SE "
            f"{kde.pooled_rel_se:.6g}  {'PASS' if kde.passed else 'FAIL'}\n"
            f"sphere integral: coefficients {np.array2string(sph.coefficients, precision=6)}  "
            f"{'PASS' if sph.passed else 'FAIL'}\n")
    out.write(".txt", text)
    sys.stdout.write(text)
    if not (kde.passed and sph.passed):
        return out.fail({"kde": kde.__dict__, "sphere": sph.__dict__})
    return EXIT_OK


def cmd_rademacher_est(args, out: Outputs) -> int:
    _check_heads(args.d_p * args.h, args.d_p, args.h)
    res = ex.rademacher_experiment(args.n, args.L, args.d_p, args.h, args.d_sigma, args.d_y, args.T,
                                   args.param_samples, args.signs, seed=args.seed)
    est = res["estimate"]
    rows = [(j, est.estimate[j], est.std_error[j], res["bound"]) for j in range(est.estimate.size)]
    out.write(".csv", csv_text(("output", "estimate", "std_error", "bound"), rows,
                               [f"n_params={est.n_params}", f"n_signs={est.n_signs}"]))
    text = "".join(f"output {j}: estimate {e:.6g} (se {s:.2g}) <= bound {b:.6g}\n" for j, e, s, b in rows)
    out.write(".txt", text)
    sys.stdout.write(text)
    if not res["passed"]:
        return out.fail({"estimate": est.estimate, "bound": res["bound"]})
    return EXIT_OK


def _check_heads(d: int, d_p: int, h: int) -> None:
    if d != d_p * h:
        raise UsageError(f"d = {d} must equal d_p * h = {d_p * h}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--config", help="flat key = value file; flags take precedence")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for independent trials")


def _lengths(p, default):
    p.add_argument("--L", type=_positive_int, nargs="+", default=list(default), help="ascending sequence lengths")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnlab", description="Attention, kernels and generalization bounds experiments.")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True

    for name, mech in (("converge-cme", "cme"), ("converge-sm", "sm")):
        p = subs.add_parser(name, help=f"{mech} attention converging to the conditional mean")
        _common(p)
        _lengths(p, (64, 256, 1024, 4096))
        p.add_argument("--seeds", type=_positive_int, default=20)
        p.add_argument("--d-p", type=_positive_int, default=4)
        p.add_argument("--d-v", type=_positive_int, default=8)
        p.add_argument("--noise", type=float, default=0.1)
        p.add_argument("--lam-coef", type=_positive_float, default=0.05)
        p.add_argument("--lam-power", type=float, default=0.8)
        p.add_argument("--bandwidth", type=_positive_float, default=0.5)
        if mech == "sm":
            p.add_argument("--sm-rate", type=float, default=None,
                           help="bandwidth decay exponent (default 1/(d_p+4))")
        p.set_defaults(run=_convergence(mech))

    p = subs.add_parser("singlehead-limit", help="CME attention against the single-head linear oracle")
    _common(p)
    _lengths(p, (64, 256, 1024, 4096))
    p.add_argument("--seeds", type=_positive_int, default=10)
    p.add_argument("--d", type=_positive_int, default=4)
    p.add_argument("--identity", action="store_true", help="use W_k = W_v = I")
    p.set_defaults(run=cmd_singlehead_limit)

    p = subs.add_parser("bound-report", help="layer constants, radii and generalization bound")
    _common(p)
    p.add_argument("--d", type=_positive_int, default=4)
    p.add_argument("--d-p", type=_positive_int, default=2)
    p.add_argument("--h", type=_positive_int, default=2)
    p.add_argument("--d-sigma", type=_positive_int, default=8)
    p.add_argument("--d-y", type=_positive_int, default=1)
    p.add_argument("--T", type=_positive_int, default=1)
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--eps", type=_positive_float, default=1.0)
    p.add_argument("--budget", type=float, default=1.0, help="uniform value for every norm budget")
    p.add_argument("--R0", type=float, default=1.0, help="data radius")
    p.add_argument("--r", type=_norm_index, default=2.0, help="norm index r of the conjugate pair")
    p.add_argument("--params", help="checkpoint whose realized norms replace the uniform budget")
    p.add_argument("--dudley", action="store_true", help="also report the numeric Dudley infimum")
    p.set_defaults(run=cmd_bound_report)

    p = subs.add_parser("lipschitz-audit", help="randomized audit of the Lipschitz lemmas")
    _common(p)
    p.add_argument("--trials", type=_positive_int, default=1000)
    p.add_argument("--r", type=_norm_index, default=2.0)
    p.add_argument("--lemmas", nargs="+", default=list(LEMMAS))
    p.set_defaults(run=cmd_lipschitz_audit)

    p = subs.add_parser("train-toy", help="fit a transformer to teacher data")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=64)
    p.add_argument("--n-test", type=_positive_int, default=256)
    p.add_argument("--L", type=_positive_int, default=8)
    p.add_argument("--d-p", type=_positive_int, default=2)
    p.add_argument("--h", type=_positive_int, default=2)
    p.add_argument("--d-sigma", type=_positive_int, default=8)
    p.add_argument("--d-y", type=_positive_int, default=2)
    p.add_argument("--T", type=_positive_int, default=1)
    p.add_argument("--steps", type=_positive_int, default=2000)
    p.add_argument("--lr", type=_positive_float, default=0.5)
    p.add_argument("--probes", type=int, default=8)
    p.set_defaults(run=cmd_train_toy)

    p = subs.add_parser("ssl-transfer", help="pretrained versus random frozen attention downstream")
    _common(p)
    p.add_argument("--seeds", type=_positive_int, default=5)
    p.add_argument("--d-token", type=_positive_int, default=4)
    p.add_argument("--d-c", type=_positive_int, default=3)
    p.add_argument("--d-r", type=_positive_int, default=1)
    p.add_argument("--L", type=_positive_int, default=16)
    p.add_argument("--noise", type=_positive_float, default=0.1)
    p.add_argument("--d-p", type=_positive_int, default=4)
    p.add_argument("--n-pretrain", type=_positive_int, default=256)
    p.add_argument("--n-downstream", type=_positive_int, default=64)
    p.add_argument("--n-test", type=_positive_int, default=256)
    p.add_argument("--target-scale", type=_positive_float, default=0.25)
    p.add_argument("--pretrain-steps", type=_positive_int, default=600)
    p.add_argument("--downstream-steps", type=_positive_int, default=600)
    p.add_argument("--lr", type=_positive_float, default=0.5)
    p.add_argument("--kernel", choices=("exponential", "rbf"), default="exponential")
    p.set_defaults(run=cmd_ssl_transfer)

    p = subs.add_parser("kde-check", help="conditional KDE mean against softmax attention on the sphere")
    _common(p)
    p.add_argument("--queries", type=_positive_int, default=5)
    p.add_argument("--n-mc", type=_positive_int, default=200_000)
    p.add_argument("--temperature", type=_positive_float, default=1.0)
    p.add_argument("--d", type=_positive_int, default=3)
    p.add_argument("--L", type=_positive_int, default=8)
    p.set_defaults(run=cmd_kde_check)

    p = subs.add_parser("rademacher-est", help="sampled Rademacher estimate next to the covering bound")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=32)
    p.add_argument("--L", type=_positive_int, default=6)
    p.add_argument("--d-p", type=_positive_int, default=2)
    p.add_argument("--h", type=_positive_int, default=2)
    p.add_argument("--d-sigma", type=_positive_int, default=4)
    p.add_argument("--d-y", type=_positive_int, default=1)
    p.add_argument("--T", type=_positive_int, default=1)
    p.add_argument("--param-samples", type=_positive_int, default=64)
    p.add_argument("--signs", type=_positive_int, default=200)
    p.set_defaults(run=cmd_rademacher_est)

    parser._subcommands = subs.choices  # type: ignore[attr-defined]
    return parser


def _coerce(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{action.dest}: expected a boolean, got {raw!r}")
    convert: Callable = action.type or str
    try:
        if action.nargs in ("+", "*"):
            items = [s for s in raw.replace(",", " ").split() if s]
            if not items and action.nargs == "+":
                raise UsageError(f"{action.dest}: empty list")
            values = [convert(s) for s in items]
        else:
            values = convert(raw)
    except (ValueError, argparse.ArgumentTypeError) as err:
        raise UsageError(f"{action.dest}: {err}") from None
    if action.choices is not None:
        for v in values if isinstance(values, list) else [values]:
            if v not in action.choices:
                raise UsageError(f"{action.dest}: {v!r} is not one of {sorted(action.choices)}")
    return values


def apply_config(sub: argparse.ArgumentParser, config: Dict[str, str]) -> None:
    """Install ``config`` values as defaults of ``sub`` so that explicit flags still win."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in config.items():
        if key not in actions:
            raise UsageError(f"unknown configuration key {key!r}")
        defaults[key] = _coerce(actions[key], raw)
    sub.set_defaults(**defaults)


def _validate(args) -> None:
    L = getattr(args, "L", None)
    if isinstance(L, list):
        if not L:
            raise UsageError("the list of sequence lengths is empty")
        if any(b <= a for a, b in zip(L, L[1:])):
            raise UsageError("sequence lengths must be strictly ascending")
    if args.command == "bound-report" and not args.params:
        _check_heads(args.d, args.d_p, args.h)
    if args.command == "singlehead-limit" and args.d % 2:
        raise UsageError("singlehead-limit needs an even d for the two-head contrast")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            try:
                config = read_config(args.config)
            except (OSError, ConfigError) as err:
                raise UsageError(f"cannot read config: {err}") from None
            apply_config(parser._subcommands[args.command], config)  # type: ignore[attr-defined]
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        _validate(args)
        return args.run(args, Outputs(args.out, args.command))
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"attnlab: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
