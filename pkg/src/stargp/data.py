"""CSV ingestion, lag features, normalization, and synthetic data.

The ingest schema is one header row `timestamp,<site>,<site>,...` with
ISO-8601 timestamps and real power values.  Rows outside the configured
day window are filtered, rows with any missing value are dropped (and
counted), then per-site lag features are built at the forecast horizon:
the target at grid position j uses the site values at positions
j - horizon, j - horizon - 1, ..., so every feature predates the target
by at least `horizon` steps.  The first feature column is the target's
time in hours since the first surviving row and is never normalized;
every other feature column and every target column is standardized.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    EmptyAfterFilter,
    NonMonotoneTime,
    SchemaError,
)
from .util import atomic_write_text

PREDICTIONS_HEADER = ["timestamp", "site", "mean", "variance"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass
class NormState:
    """Per-column standardization constants; time column pinned to (0, 1)."""

    site_ids: list
    feature_names: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    def as_dict(self) -> dict:
        return {
            "site_ids": list(self.site_ids),
            "feature_names": list(self.feature_names),
            "x_mean": [float(v) for v in self.x_mean],
            "x_scale": [float(v) for v in self.x_scale],
            "y_mean": [float(v) for v in self.y_mean],
            "y_scale": [float(v) for v in self.y_scale],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NormState":
        try:
            return cls(site_ids=list(raw["site_ids"]),
                       feature_names=list(raw["feature_names"]),
                       x_mean=np.asarray(raw["x_mean"], dtype=float),
                       x_scale=np.asarray(raw["x_scale"], dtype=float),
                       y_mean=np.asarray(raw["y_mean"], dtype=float),
                       y_scale=np.asarray(raw["y_scale"], dtype=float))
        except (KeyError, TypeError) as err:
            raise ConfigError(f"malformed normalization state: {err}") from err


@dataclass
class Dataset:
    timestamps: pd.DatetimeIndex     # one entry per target row
    site_ids: list
    X: np.ndarray                    # (n, d) normalized features
    Y: np.ndarray                    # (n, P) normalized targets
    norm: NormState
    dropped_rows: int
    horizon: int
    lags: int
    frame_timestamps: pd.DatetimeIndex   # all surviving source rows
    frame_values: np.ndarray             # raw site values for those rows

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return len(self.site_ids)


def _minutes_of_day(spec: str, name: str) -> int:
    parts = spec.split(":")
    if len(parts) != 2:
        raise ConfigError(f"{name} must look like HH:MM, got {spec!r}")
    try:
        h, m = int(parts[0]), int(parts[1])
    except ValueError as err:
        raise ConfigError(f"{name} must look like HH:MM, got {spec!r}") from err
    if not (0 <= h < 24 and 0 <= m < 60):
        raise ConfigError(f"{name} out of range: {spec!r}")
    return 60 * h + m


def _standardize(values: np.ndarray, names) -> tuple:
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    for i, s in enumerate(scale):
        if s == 0.0 or not np.isfinite(s):
            warnings.warn(f"column {names[i]!r} is constant; scale clamped to 1")
            scale[i] = 1.0
    return mean, scale


def ingest_csv(path, horizon: int = 3, lags: int = 2, day_start: str = "07:00",
               day_end: str = "19:00", timezone=None,
               norm_state: NormState = None) -> Dataset:
    """Load a site CSV into a lagged, normalized regression dataset.

    When norm_state is given (prediction time) its constants are applied
    instead of refit, and its site list must match the file.
    """
    if horizon < 1 or lags < 1:
        raise ConfigError(f"horizon and lags must be >= 1, got {horizon}, {lags}")
    start_min = _minutes_of_day(day_start, "day_start")
    end_min = _minutes_of_day(day_end, "day_end")
    if start_min >= end_min:
        raise ConfigError(f"day window is empty: {day_start}..{day_end}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as err:
        raise SchemaError(f"{path}: {err}") from err
    cols = list(df.columns)
    if not cols or cols[0] != "timestamp" or len(cols) < 2:
        raise SchemaError(
            f"{path}: header must be 'timestamp,<site>,...', got {cols}")
    site_ids = [str(c) for c in cols[1:]]
    ts = pd.to_datetime(df["timestamp"], errors="coerce")
    if ts.isna().any():
        bad = df["timestamp"][ts.isna()].iloc[0]
        raise SchemaError(f"{path}: unparseable timestamp {bad!r}")
    if timezone is not None:
        ts = ts.dt.tz_localize(timezone) if ts.dt.tz is None \
            else ts.dt.tz_convert(timezone)
    deltas = ts.diff().iloc[1:]
    if (deltas <= pd.Timedelta(0)).any():
        where = int(deltas.index[(deltas <= pd.Timedelta(0))][0])
        raise NonMonotoneTime(f"{path}: timestamps not strictly increasing at row {where}")
    values = df[cols[1:]].apply(pd.to_numeric, errors="coerce")

    minutes = ts.dt.hour * 60 + ts.dt.minute
    in_window = (minutes >= start_min) & (minutes <= end_min)
    missing = values.isna().any(axis=1)
    dropped = int((missing & in_window).sum())
    keep = in_window & ~missing
    frame_ts = pd.DatetimeIndex(ts[keep])
    frame_vals = values[keep].to_numpy(dtype=float)

    n_rows = len(frame_ts)
    first_target = horizon + lags - 1
    if n_rows - first_target < 1:
        raise EmptyAfterFilter(
            f"{path}: {n_rows} usable rows after filtering; need at least "
            f"{first_target + 1} for horizon {horizon} and {lags} lags")

    p = len(site_ids)
    targets = np.arange(first_target, n_rows)
    time_h = (frame_ts[targets] - frame_ts[0]).total_seconds() / 3600.0
    feats = [np.asarray(time_h, dtype=float)]
    feature_names = ["time_h"]
    for i, site in enumerate(site_ids):
        for lag in range(lags):
            feats.append(frame_vals[targets - horizon - lag, i])
            feature_names.append(f"{site}_lag{lag}")
    X = np.stack(feats, axis=1)
    Y = frame_vals[targets]

    if norm_state is None:
        x_mean, x_scale = _standardize(X[:, 1:], feature_names[1:])
        y_mean, y_scale = _standardize(Y, site_ids)
        norm_state = NormState(site_ids=site_ids, feature_names=feature_names,
                               x_mean=np.concatenate([[0.0], x_mean]),
                               x_scale=np.concatenate([[1.0], x_scale]),
                               y_mean=y_mean, y_scale=y_scale)
    else:
        if list(norm_state.site_ids) != site_ids:
            raise ConfigError(
                f"{path}: sites {site_ids} do not match the stored "
                f"normalization sites {list(norm_state.site_ids)}")
        if list(norm_state.feature_names) != feature_names:
            raise ConfigError(
                f"{path}: features {feature_names} do not match the stored "
                f"normalization layout {list(norm_state.feature_names)}")
    Xn = (X - norm_state.x_mean) / norm_state.x_scale
    Yn = (Y - norm_state.y_mean) / norm_state.y_scale
    return Dataset(timestamps=frame_ts[targets], site_ids=site_ids, X=Xn, Y=Yn,
                   norm=norm_state, dropped_rows=dropped, horizon=horizon,
                   lags=lags, frame_timestamps=frame_ts, frame_values=frame_vals)


def write_site_csv(path, timestamps, site_ids, values):
    """Emit the ingest schema (raw scale); atomic, deterministic bytes."""
    values = np.asarray(values, dtype=float)
    lines = [",".join(["timestamp"] + list(site_ids))]
    for ts, row in zip(timestamps, values):
        lines.append(",".join([ts.isoformat()] + [_fmt(v) for v in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def dataset_to_csv(ds: Dataset, path):
    write_site_csv(path, ds.frame_timestamps, ds.site_ids, ds.frame_values)


def write_predictions_csv(path, timestamps, site_ids, mean, variance):
    """Long-format predictions: timestamp,site,mean,variance per (row, site)."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    lines = [",".join(PREDICTIONS_HEADER)]
    for j, ts in enumerate(timestamps):
        iso = ts.isoformat()
        for i, site in enumerate(site_ids):
            lines.append(f"{iso},{site},{_fmt(mean[j, i])},{_fmt(variance[j, i])}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_predictions_csv(path):
    """Read a predictions-schema CSV into wide (timestamps, sites, mean, var).

    Site order follows first appearance; every (timestamp, site) pair must
    be present exactly once.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != PREDICTIONS_HEADER:
        raise SchemaError(f"{path}: header must be {','.join(PREDICTIONS_HEADER)}, "
                          f"got {list(df.columns)}")
    sites = list(dict.fromkeys(df["site"].astype(str)))
    stamps = list(dict.fromkeys(df["timestamp"].astype(str)))
    mean = np.full((len(stamps), len(sites)), np.nan)
    var = np.full((len(stamps), len(sites)), np.nan)
    row_of = {t: j for j, t in enumerate(stamps)}
    col_of = {s: i for i, s in enumerate(sites)}
    for t, s, m, v in zip(df["timestamp"].astype(str), df["site"].astype(str),
                          pd.to_numeric(df["mean"], errors="coerce"),
                          pd.to_numeric(df["variance"], errors="coerce")):
        mean[row_of[t], col_of[s]] = m
        var[row_of[t], col_of[s]] = v
    if np.isnan(mean).any() or np.isnan(var).any():
        raise SchemaError(f"{path}: missing or non-numeric entries after alignment")
    return stamps, sites, mean, var


def write_rows_csv(path, fieldnames, rows):
    """Generic CSV writer with deterministic float formatting."""
    lines = [",".join(fieldnames)]
    for row in rows:
        cells = []
        for name in fieldnames:
            v = row[name]
            cells.append(_fmt(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _day_window_grid(n: int, start_date: str, cadence_minutes: int):
    """n consecutive timestamps covering 07:00..19:00 each day."""
    per_day = (12 * 60) // cadence_minutes + 1
    days = math.ceil(n / per_day)
    out = []
    base = pd.Timestamp(start_date)
    for d in range(days):
        day0 = base + pd.Timedelta(days=d, hours=7)
        for k in range(per_day):
            out.append(day0 + pd.Timedelta(minutes=cadence_minutes * k))
            if len(out) == n:
                return pd.DatetimeIndex(out)
    return pd.DatetimeIndex(out)


SYNTH_PRESETS = ("rbf-h", "ricker-h")


def synth_generate(out_dir, p: int = 4, n: int = 2000, seed: int = 0,
                   preset: str = "rbf-h", noise_std: float = 0.05,
                   cadence_minutes: int = 5, start_date: str = "2019-06-01",
                   site_spacing: float = 1.0, node_lengthscale: float = 1.5,
                   weight_lengthscale: float = 6.0, weight_amplitude: float = 0.15,
                   node_variance: float = 1.0, h_scale: float = None) -> dict:
    """Sample the generative model onto CSV files.

    Writes data.csv (ingest schema), truth_latents.csv (every weight and
    node path), and truth_params.json.  Node functions are GP draws over
    time; weight functions are GP draws around a distance-decaying mean,
    so nearby sites stay more correlated than distant ones.  Fixed seeds
    give byte-identical files.  node_variance=0 pins every node to the
    constant 1; weight_amplitude=0 pins weights to their means.
    """
    if preset not in SYNTH_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {SYNTH_PRESETS}")
    rng = np.random.default_rng(seed)
    ts = _day_window_grid(n, start_date, cadence_minutes)
    time_h = np.asarray((ts - ts[0]).total_seconds() / 3600.0, dtype=float)
    coords = site_spacing * np.arange(p, dtype=float)
    dist = np.abs(coords[:, None] - coords[None, :])
    if h_scale is None:
        h_scale = max(1.2 * site_spacing, 1e-6)
    if preset == "rbf-h":
        w_mean = np.exp(-((dist / h_scale) ** 2))
    else:
        t = dist / h_scale
        w_mean = (1.0 - t ** 2) * np.exp(-0.5 * t ** 2)

    dt2 = (time_h[:, None] - time_h[None, :]) ** 2
    eye = np.eye(n)

    if node_variance > 0:
        l_node = np.linalg.cholesky(node_variance * np.exp(-dt2 / (2 * node_lengthscale ** 2))
                                    + 1e-8 * eye)
        g = np.stack([l_node @ rng.standard_normal(n) for _ in range(p)], axis=1)
    else:
        g = np.ones((n, p))
    if weight_amplitude > 0:
        l_w = np.linalg.cholesky(np.exp(-dt2 / (2 * weight_lengthscale ** 2)) + 1e-8 * eye)
        w = np.empty((n, p, p))
        for i in range(p):
            for j in range(p):
                w[:, i, j] = w_mean[i, j] + weight_amplitude * (l_w @ rng.standard_normal(n))
    else:
        w = np.broadcast_to(w_mean, (n, p, p)).copy()
    y = np.einsum("tij,tj->ti", w, g)
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal((n, p))

    os.makedirs(out_dir, exist_ok=True)
    site_ids = [f"site_{i + 1}" for i in range(p)]
    data_path = os.path.join(out_dir, "data.csv")
    write_site_csv(data_path, ts, site_ids, y)

    latent_cols = [f"w_{i + 1}_{j + 1}" for i in range(p) for j in range(p)] \
        + [f"g_{j + 1}" for j in range(p)]
    latents = np.concatenate([w.reshape(n, p * p), g], axis=1)
    truth_path = os.path.join(out_dir, "truth_latents.csv")
    write_site_csv(truth_path, ts, latent_cols, latents)

    params = {
        "preset": preset, "p": p, "n": n, "seed": seed,
        "noise_std": noise_std, "cadence_minutes": cadence_minutes,
        "start_date": start_date, "site_spacing": site_spacing,
        "node_lengthscale": node_lengthscale,
        "weight_lengthscale": weight_lengthscale,
        "weight_amplitude": weight_amplitude, "node_variance": node_variance,
        "h_scale": h_scale, "site_coords": [float(c) for c in coords],
    }
    params_path = os.path.join(out_dir, "truth_params.json")
    atomic_write_text(params_path, json.dumps(params, sort_keys=True, indent=2) + "\n")

    report = {"paths": {"data": data_path, "latents": truth_path,
                        "params": params_path}}
    if p > 1 and np.ptp(y, axis=0).min() > 0:
        corr = np.corrcoef(y.T)
        by_distance = []
        for k in range(1, p):
            pairs = [corr[i, i + k] for i in range(p - k)]
            by_distance.append(float(np.mean(pairs)))
        report["corr_by_distance"] = by_distance
        report["monotone"] = all(a > b for a, b in zip(by_distance, by_distance[1:]))
    return report
