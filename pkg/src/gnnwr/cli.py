"""``gnnwr`` command-line entry point.

Exit codes: 0 on success, 1 on a domain or I/O error (message on stderr),
2 on a usage error. A partially failed experiment still exits 0; the failed
folds are listed as warnings and in ``summary.md``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from . import harness, synthgen
from .diagnostics import f1_test, f2_test
from .errors import ConfigError, GnnwrError
from .geodata import TEST, Schema, format_float, ingest_csv, load_schema, split_folds, write_snapshot
from .gnnwr import export_surfaces, hat_matrix, load_bundle, predict_gnnwr, save_bundle, train_gnnwr, training_dataset
from .gwr import KernelSpec, fit_gwr, golden_search_bandwidth
from .olr import fit_olr
from .swnn import TrainConfig, hidden_layers

DEFAULT_SEED = 20200101
OUTPUT_ROOT_ENV = "GNNWR_OUTPUT_ROOT"

log = logging.getLogger("gnnwr")


def _out_dir(args):
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, "gnnwr-output")) / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args):
    if getattr(args, "entropy", False):
        seed = secrets.randbits(32)
        log.warning("using entropy seed %d", seed)
        return seed
    return args.seed


def _dump(path, obj):
    Path(path).write_text(json.dumps(harness._jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _schema(data, schema_path):
    if schema_path:
        return load_schema(schema_path)
    with open(data, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    covs = [c for c in header if c not in ("x_coord", "y_coord", "target")]
    return Schema(target="target", covariates=tuple(covs), x="x_coord", y="y_coord")


def _load(args):
    return ingest_csv(args.data, _schema(args.data, args.schema))


def _layers(text):
    try:
        return tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"layers must be comma-separated integers, got {text!r}")


def cmd_synth(args):
    out = _out_dir(args)
    spec = synthgen.desk_spec(seed=_seed(args), n=args.n, noise_sd=args.noise_sd, stationary=args.stationary)
    ds, beta = synthgen.generate(spec)
    synthgen.write_dataset_csv(ds, out / "data.csv")
    synthgen.write_field_csv(ds.coords, beta, out / "true_beta.csv")
    schema = synthgen.synthetic_schema(ds.p)
    covs = ", ".join(f'"{c}"' for c in schema.covariates)
    (out / "schema.toml").write_text(
        f'target = "{schema.target}"\ncovariates = [{covs}]\nx = "{schema.x}"\ny = "{schema.y}"\n',
        encoding="utf-8",
    )
    print(out / "data.csv")
    return 0


def cmd_ingest(args):
    out = _out_dir(args)
    ds = _load(args)
    if args.split:
        ds = split_folds(ds, args.test_frac, args.k, _seed(args))
    write_snapshot(ds, out / "snapshot.csv", out / "snapshot.json")
    for row, why in ds.rejected:
        log.warning("rejected row %d: %s", row, why)
    print(f"{ds.n} rows accepted, {len(ds.rejected)} rejected")
    return 0


def cmd_fit_olr(args):
    out = _out_dir(args)
    model = fit_olr(_load(args))
    model.to_json(out / "olr.json")
    print(f"coefficients: {', '.join(format_float(b) for b in model.beta_hat)}")
    return 0


def cmd_fit_gwr(args):
    out = _out_dir(args)
    ds = _load(args)
    if args.bandwidth is not None:
        spec = KernelSpec.fixed(args.bandwidth, args.kernel)
    elif args.neighbors is not None:
        spec = KernelSpec.adaptive(args.neighbors, args.kernel)
    else:
        lo = args.search_lo
        hi = ds.n - 1 if args.search_hi is None else args.search_hi
        m, _ = golden_search_bandwidth(ds, args.kernel, lo, hi)
        spec = KernelSpec.adaptive(m, args.kernel)
    spec.check_for(ds.p)
    model = fit_gwr(ds, spec)
    model.to_json(out / "gwr.json")
    model.write_local_beta(out / "local_beta.csv")
    print(f"bandwidth {spec.bandwidth}, AICc {format_float(model.aicc)}")
    return 0


def _train_config(args, seed):
    base = TrainConfig.desk(seed=seed) if args.profile == "desk" else TrainConfig.full(seed=seed)
    if args.max_steps is not None:
        base = TrainConfig(**{**base.to_dict(), "max_epochs": args.max_steps})
    return base


def cmd_fit_gnnwr(args):
    out = _out_dir(args)
    seed = _seed(args)
    ds = split_folds(_load(args), args.test_frac, args.k, seed)
    widths = args.layers or ((64, 16) if args.profile == "desk" else (512, 128, 64, 16))
    model = train_gnnwr(ds, args.val_fold, hidden_layers(widths), _train_config(args, seed))
    save_bundle(model, out / "bundle")
    test = ds.subset(np.flatnonzero(ds.folds == TEST))
    if test.n:
        pred = predict_gnnwr(model, test, model.norm.normalize_X(test.X) if model.norm else test.X)
        with open(out / "test_predictions.csv", "w", encoding="utf-8") as fh:
            fh.write("row_id,y,prediction\n")
            for rid, yv, pv in zip(test.row_ids, test.y, pred):
                fh.write(f"{int(rid)},{format_float(yv)},{format_float(pv)}\n")
    h = model.history
    print(f"best step {h.best_step}, stopped at {h.stopped_step} ({h.reason}), val RMSE {h.best_val:.6g}")
    return 0


def cmd_experiment(args):
    out = _out_dir(args)
    overrides = list(args.set or ())
    if args.seed is not None or args.entropy:
        overrides.append(f"split.seed={_seed(args)}")
    if args.config:
        config = harness.load_config(args.config, overrides)
    else:
        raw = {"profile": args.profile, "split": {"seed": DEFAULT_SEED}}
        if args.data:
            schema = _schema(args.data, args.schema)
            raw["data"] = {"csv": str(Path(args.data).resolve()), "schema": schema.to_mapping()}
        for item in overrides:
            key, _, value = item.partition("=")
            section, _, name = key.partition(".")
            if not name:
                raise ConfigError(f"override {item!r} must be section.key=value")
            raw.setdefault(section, {})[name] = harness.parse_value(value)
        config = harness.config_from_mapping(raw)
    if args.threads is not None:
        config.threads = args.threads
    result = harness.run_experiment(config, out_dir=out)
    for item in result.failures:
        log.warning("fold %d %s failed: %s", item["fold"], item["model"], item["error"])
    print((out / "summary.md").read_text(encoding="utf-8"))
    return 0


def cmd_diagnose(args):
    out = _out_dir(args)
    model = load_bundle(args.bundle)
    ds = training_dataset(model)
    S = hat_matrix(model, ds)
    rss = float(np.sum((ds.y - S @ ds.y) ** 2))
    olr = fit_olr(ds, with_tests=False)
    f1 = f1_test(rss, S, olr.rss, ds.n, ds.p, args.alpha, args.tail)
    f2 = [f2_test(model, ds, k, args.alpha, S=S).to_dict() for k in range(ds.p + 1)]
    _dump(out / "diagnosis.json", {"rss_model": rss, "rss_olr": olr.rss, "f1": f1.to_dict(), "f2": f2})
    print(f"F1 = {format_float(f1.f1)}, p = {f1.p_value:.6g}, {'significant' if f1.significant else 'not significant'}")
    for r in f2:
        print(f"F2[{r['name']}] = {format_float(r['f2'])}, p = {r['p_value']:.6g}")
    return 0


def cmd_export_surfaces(args):
    out = _out_dir(args)
    model = load_bundle(args.bundle)
    if args.points:
        pts = np.loadtxt(args.points, delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2)
    else:
        pts = model.anchors
    surf = export_surfaces(model, pts)
    surf.write_csv(out / "surfaces.csv")
    _dump(out / "surfaces_summary.json", surf.summary())
    print(out / "surfaces.csv")
    return 0


def _data_args(p):
    p.add_argument("data", help="input CSV")
    p.add_argument("--schema", help="TOML schema naming target, covariates and coordinate columns "
                   "(default: the synthetic-generator layout)")


def _seed_args(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--entropy", action="store_true", help="draw a fresh seed from the OS instead of --seed")


def _split_args(p):
    p.add_argument("--test-frac", type=float, default=0.15, help="held-out test share (default 0.15)")
    p.add_argument("-k", type=int, default=10, help="number of cross-validation folds (default 10)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gnnwr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name} or ./gnnwr-output/{name})")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset with known coefficient fields")
    p.add_argument("--n", type=int, default=600, help="number of points (default 600)")
    p.add_argument("--noise-sd", type=float, default=1.7, help="noise standard deviation (default 1.7)")
    p.add_argument("--stationary", action="store_true", help="use constant coefficient fields")
    _seed_args(p)

    p = add("ingest", cmd_ingest, "validate a CSV, project coordinates and write a snapshot")
    _data_args(p)
    p.add_argument("--split", action="store_true", help="also assign test/fold labels")
    _split_args(p)
    _seed_args(p)

    p = add("fit-olr", cmd_fit_olr, "fit the global ordinary linear regression")
    _data_args(p)

    p = add("fit-gwr", cmd_fit_gwr, "fit geographically weighted regression")
    _data_args(p)
    p.add_argument("--kernel", choices=("bisquare", "gaussian"), default="bisquare", help="kernel family")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--neighbors", type=int, help="adaptive bandwidth: number of neighbors m")
    g.add_argument("--bandwidth", type=float, help="fixed bandwidth in meters")
    p.add_argument("--search-lo", type=int, default=100, help="golden-search lower bound on m (default 100)")
    p.add_argument("--search-hi", type=int, help="golden-search upper bound on m (default n-1)")

    p = add("fit-gnnwr", cmd_fit_gnnwr, "train one GNNWR model and save a bundle")
    _data_args(p)
    p.add_argument("--profile", choices=("desk", "full"), default="desk", help="training scale (default desk)")
    p.add_argument("--layers", type=_layers, help="hidden widths, e.g. 64,16")
    p.add_argument("--val-fold", type=int, default=0, help="validation fold (default 0)")
    p.add_argument("--max-steps", type=int, help="override the maximum number of training steps")
    _split_args(p)
    _seed_args(p)

    p = add("experiment", cmd_experiment, "run the cross-validated OLR/GWR/GNNWR comparison")
    p.add_argument("--config", help="experiment TOML file")
    p.add_argument("--data", help="input CSV when no --config is given (default: synthetic desk data)")
    p.add_argument("--schema", help="schema TOML for --data")
    p.add_argument("--profile", choices=("desk", "full"), default="desk", help="defaults when no --config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--threads", type=int, help="maximum number of folds run concurrently")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: config, else {DEFAULT_SEED})")
    p.add_argument("--entropy", action="store_true", help="draw a fresh seed from the OS")

    p = add("diagnose", cmd_diagnose, "recompute F1 and F2 from a saved GNNWR bundle")
    p.add_argument("bundle", help="bundle directory written by fit-gnnwr or experiment")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    p.add_argument("--tail", choices=("left", "right"), default="left", help="F1 rejection tail (default left)")

    p = add("export-surfaces", cmd_export_surfaces, "write GNNWR coefficient surfaces as CSV")
    p.add_argument("bundle", help="bundle directory")
    p.add_argument("--points", help="CSV whose first two columns are projected x,y (default: training anchors)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (GnnwrError, OSError) as exc:
        print(f"gnnwr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
