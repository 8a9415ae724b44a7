"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure (bad data, bad
config, numeric abort, or a kernel-verification violation).  Status goes
to stderr; machine-readable output goes to the files named by flags.
Set STARGP_NUM_THREADS to pin the number of torch threads.
"""

import argparse
import os
import sys

import numpy as np
import torch

from .config import (
    build_from_config,
    load_run_config,
    run_config_from_dict,
)
from .data import (
    PREDICTIONS_HEADER,
    NormState,
    ingest_csv,
    read_predictions_csv,
    synth_generate,
    write_predictions_csv,
    write_rows_csv,
)
from .errors import ConfigError, SchemaError, StarGpError
from .forecast import PredictiveSummary, metrics, predict
from .kernels import split_delta, verify_implicit_sparsity
from .train import apply_checkpoint, benchmark, fit, load_checkpoint


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _say(msg):
    print(msg, file=sys.stderr)


def _apply_thread_env():
    raw = os.environ.get("STARGP_NUM_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        _say(f"stargp: ignoring STARGP_NUM_THREADS={raw!r} (not an integer)")
        return
    if n > 0:
        torch.set_num_threads(n)


def _ingest_for(cfg, path):
    return ingest_csv(path, horizon=cfg.data.horizon, lags=cfg.data.lags,
                      day_start=cfg.data.day_start, day_end=cfg.data.day_end)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.data is not None:
        cfg.data.train_csv = args.data
    if args.seed is not None:
        cfg.train.seed = args.seed
    if cfg.data.train_csv is None:
        raise ConfigError("no training data: set data.train_csv in the config "
                          "or pass --data")
    ds = _ingest_for(cfg, cfg.data.train_csv)
    _say(f"loaded {ds.n} rows, {ds.p} sites ({ds.dropped_rows} dropped) "
         f"from {cfg.data.train_csv}")
    model, post = build_from_config(cfg, ds)
    os.makedirs(args.out_dir, exist_ok=True)
    report = fit(model, post, ds.X, ds.Y, cfg.train, out_dir=args.out_dir,
                 run_config=cfg.resolved_dict(), norm=ds.norm.as_dict())
    write_rows_csv(os.path.join(args.out_dir, "train_report.csv"),
                   ["epoch", "elbo"],
                   [{"epoch": i, "elbo": float(v)} for i, v in enumerate(report.elbos)])
    write_rows_csv(os.path.join(args.out_dir, "run_summary.csv"),
                   ["epochs_run", "stop_reason", "final_elbo",
                    "step_time_mean_s", "eval_time_mean_s", "lr_halved"],
                   [{"epochs_run": report.epochs_run,
                     "stop_reason": report.stop_reason,
                     "final_elbo": float(report.elbos[-1]),
                     "step_time_mean_s": report.step_time_mean,
                     "eval_time_mean_s": report.eval_time_mean,
                     "lr_halved": report.lr_halved}])
    _say(f"trained {report.epochs_run} epochs ({report.stop_reason}); "
         f"final elbo {report.elbos[-1]:.6f}")
    _say(f"wrote {report.checkpoint_paths[-1]}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.config:
        raise ConfigError(f"{args.checkpoint} carries no run config; "
                          "cannot rebuild the model")
    if ckpt.norm is None:
        raise ConfigError(f"{args.checkpoint} carries no normalization state")
    cfg = run_config_from_dict(ckpt.config)
    norm = NormState.from_dict(ckpt.norm)
    ds = ingest_csv(args.data, horizon=cfg.data.horizon, lags=cfg.data.lags,
                    day_start=cfg.data.day_start, day_end=cfg.data.day_end,
                    norm_state=norm)
    model, post = build_from_config(cfg, ds)
    apply_checkpoint(model, post, ckpt)
    seed = ckpt.seed if args.seed is None else args.seed
    summary = predict(model, post, ds.X, n_samples=args.samples, seed=seed,
                      chunk_size=args.chunk_size)
    mean = summary.mean.numpy() * norm.y_scale + norm.y_mean
    var = summary.variance.numpy() * norm.y_scale ** 2
    write_predictions_csv(args.out, ds.timestamps, ds.site_ids, mean, var)
    _say(f"wrote {ds.n} predictions x {ds.p} sites to {args.out}")
    return 0


def _truth_matrix(path, stamps, sites) -> np.ndarray:
    """Actual values aligned to the prediction grid.

    Accepts either the predictions schema (the mean column is the value)
    or the ingest schema (one column per site).
    """
    import pandas as pd

    with open(path) as handle:
        header = [c.strip() for c in handle.readline().rstrip("\n").split(",")]
    lookup = {}
    if header == PREDICTIONS_HEADER:
        t_stamps, t_sites, t_mean, _ = read_predictions_csv(path)
        for j, ts in enumerate(t_stamps):
            t = pd.Timestamp(ts)
            for i, site in enumerate(t_sites):
                lookup[(t, site)] = t_mean[j, i]
    elif header and header[0] == "timestamp" and len(header) > 1:
        df = pd.read_csv(path, float_precision="round_trip")
        ts = pd.to_datetime(df["timestamp"], errors="coerce")
        if ts.isna().any():
            raise SchemaError(f"{path}: unparseable timestamps")
        for col in header[1:]:
            vals = pd.to_numeric(df[col], errors="coerce")
            for t, v in zip(ts, vals):
                lookup[(t, col)] = v
    else:
        raise SchemaError(f"{path}: expected the predictions schema or "
                          f"'timestamp,<site>,...', got {header}")
    out = np.empty((len(stamps), len(sites)), dtype=float)
    for j, ts in enumerate(stamps):
        t = pd.Timestamp(ts)
        for i, site in enumerate(sites):
            if (t, site) not in lookup:
                raise SchemaError(f"{path}: no value for {ts}, site {site}")
            out[j, i] = lookup[(t, site)]
    if not np.isfinite(out).all():
        raise SchemaError(f"{path}: non-numeric values on the prediction grid")
    return out


def cmd_eval(args) -> int:
    stamps, sites, mean, var = read_predictions_csv(args.predictions)
    truth = _truth_matrix(args.truth, stamps, sites)
    report = metrics(PredictiveSummary(mean=mean, variance=var), truth,
                     site_ids=sites)
    write_rows_csv(args.out, ["site", "rmse", "mae", "nlpd", "fvar"],
                   [{k: (float(v) if k != "site" else v) for k, v in row.items()}
                    for row in report.rows()])
    _say(f"pooled rmse {report.pooled_rmse:.6f}  mae {report.pooled_mae:.6f}  "
         f"nlpd {report.pooled_nlpd:.6f}")
    _say(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.data.train_csv is None:
        raise ConfigError("bench needs data.train_csv in the config")
    ds = _ingest_for(cfg, cfg.data.train_csv)
    model, post = build_from_config(cfg, ds)
    rows = benchmark(model, post, ds.X, ds.Y, cfg.train,
                     steps=args.steps, repeats=args.repeats)
    write_rows_csv(args.out, ["metric", "value"], rows)
    for row in rows:
        _say(f"{row['metric']}: {row['value']:.6g}")
    return 0


def cmd_synth(args) -> int:
    report = synth_generate(args.out_dir, p=args.sites, n=args.rows,
                            seed=args.seed, preset=args.preset,
                            noise_std=args.noise_std,
                            site_spacing=args.spacing)
    for name, path in report["paths"].items():
        _say(f"wrote {name}: {path}")
    if "corr_by_distance" in report:
        corr = ", ".join(f"{c:.3f}" for c in report["corr_by_distance"])
        _say(f"mean correlation by site distance: {corr}")
    return 0


def cmd_verify_kernel(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.data.train_csv is None:
        raise ConfigError("verify-kernel needs data.train_csv in the config")
    ds = _ingest_for(cfg, cfg.data.train_csv)
    model, _ = build_from_config(cfg, ds)
    rows = []
    failed = 0
    checked = 0
    for g in model.groups:
        if g.sparsity_mode != "implicit" or g.h_kernel is None:
            continue
        core, _deltas = split_delta(g.h_kernel)
        rep = verify_implicit_sparsity(core, g.h_features, tol=args.tol)
        checked += 1
        failed += 0 if rep.passed else 1
        rows.append({"group": g.group_id, "max_violation": rep.max_violation,
                     "tol": rep.tol, "passed": rep.passed})
    if args.out:
        write_rows_csv(args.out, ["group", "max_violation", "tol", "passed"], rows)
    if checked == 0:
        _say("no implicit-mode groups to verify")
        return 0
    worst = max(row["max_violation"] for row in rows)
    _say(f"checked {checked} implicit groups; worst violation {worst:.3e}")
    if failed:
        _say(f"{failed} group(s) violate the separability identity")
        return 2
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="stargp",
                     description="Grouped sparse GP forecasting for networks of sites.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write checkpoints")
    t.add_argument("--config", required=True, help="run config YAML")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and reports")
    t.add_argument("--data", help="override data.train_csv")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV to forecast (ingest schema)")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, help="override the checkpoint seed")
    p.add_argument("--chunk-size", type=int, default=1024)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a predictions CSV against actuals")
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", required=True,
                   help="actuals: ingest schema or predictions schema")
    e.add_argument("--out", required=True, help="metrics CSV to write")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="timing table for train / elbo / predict")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="timings CSV to write")
    b.add_argument("--steps", type=int, default=5)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic site network")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sites", type=int, default=4)
    s.add_argument("--rows", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", default="rbf-h", choices=["rbf-h", "ricker-h"])
    s.add_argument("--noise-std", type=float, default=0.05)
    s.add_argument("--spacing", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify-kernel",
                       help="check implicit-mode kernels for separability")
    v.add_argument("--config", required=True)
    v.add_argument("--out", help="optional report CSV")
    v.add_argument("--tol", type=float, default=1e-10)
    v.set_defaults(func=cmd_verify_kernel)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    _apply_thread_env()
    try:
        return args.func(args)
    except StarGpError as err:
        _say(f"stargp: error: {err}")
        return 2
    except OSError as err:
        _say(f"stargp: error: {err}")
        return 2
    except Exception as err:                      # noqa: BLE001
        _say(f"stargp: unexpected {type(err).__name__}: {err}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
