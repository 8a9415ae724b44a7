"""Predictive distribution at test inputs and the evaluation metrics.

The predictive for task i at input x is the Monte Carlo law of
y* = sum_j W_ij(x) g_j(x) under the variational posterior, plus observation
noise.  Draws reuse the indirect per-group sampler, so prediction costs
O(S * Q_total) per point and never builds a joint covariance.

NLPD here is Gaussian moment-matched: each per-point predictive is summarized
by its MC mean and variance and scored as -log N(y; mean, variance).  The MC
law of W g is not Gaussian, so this choice shifts NLPD by a model-independent
amount; it is applied uniformly to every method being compared.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, ShapeMismatch
from .model import GgpModel
from .star import DTYPE
from .variational import (
    MixturePosterior,
    assemble_outputs,
    build_contexts,
    make_generator,
    sample_latents,
)

PREDICT_STREAM = 0xF0CA

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PredictiveSummary:
    """Per-point, per-task predictive mean and variance (model scale).

    variance includes the observation noise; samples holds the raw
    (n, S, P) draws when requested (noiseless, before adding Sigma_y).
    """

    mean: Tensor                 # (n, P)
    variance: Tensor             # (n, P)
    samples: Tensor = None

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]


def predict(model: GgpModel, post: MixturePosterior, X_test, n_samples: int,
            seed: int = 0, chunk_size: int = 1024, keep_samples: bool = False,
            contexts=None) -> PredictiveSummary:
    """MC predictive summary at X_test.

    mean is the sample mean of W g; variance is the sample variance plus
    the per-task noise.  Inputs are processed in chunks; the random stream
    is keyed (seed, PREDICT_STREAM, chunk, group) so results are
    reproducible for a fixed chunk size.
    """
    if n_samples < 2:
        raise ConfigError(f"need at least 2 samples for a variance, got {n_samples}")
    X = torch.as_tensor(X_test, dtype=DTYPE)
    if X.dim() == 1:
        X = X.reshape(-1, 1)
    with torch.no_grad():
        if contexts is None:
            contexts = build_contexts(model)
        noise = model.noise_variances()
        means, variances, kept = [], [], []
        for ci, sl in enumerate(torch.split(torch.arange(X.shape[0]), chunk_size)):
            f = sample_latents(model, post, contexts, X[sl], n_samples,
                               (seed, PREDICT_STREAM, ci))
            y = assemble_outputs(model, f)                   # (b, S, P)
            means.append(y.mean(dim=1))
            variances.append(y.var(dim=1, unbiased=True) + noise)
            if keep_samples:
                kept.append(y)
    return PredictiveSummary(
        mean=torch.cat(means),
        variance=torch.cat(variances),
        samples=torch.cat(kept) if keep_samples else None,
    )


@dataclass
class MetricReport:
    """RMSE / MAE / NLPD / FVAR per task plus pooled; all losses."""

    site_ids: list
    rmse: np.ndarray
    mae: np.ndarray
    nlpd: np.ndarray
    fvar: np.ndarray
    pooled_rmse: float
    pooled_mae: float
    pooled_nlpd: float
    pooled_fvar: float

    def rows(self):
        out = []
        for i, site in enumerate(self.site_ids):
            out.append({"site": site, "rmse": self.rmse[i], "mae": self.mae[i],
                        "nlpd": self.nlpd[i], "fvar": self.fvar[i]})
        out.append({"site": "pooled", "rmse": self.pooled_rmse,
                    "mae": self.pooled_mae, "nlpd": self.pooled_nlpd,
                    "fvar": self.pooled_fvar})
        return out


def _gaussian_nlpd(y, mean, var):
    return 0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


def metrics(pred: PredictiveSummary, Y_test, denormalizer=None,
            site_ids=None) -> MetricReport:
    """Evaluate predictions on the denormalized (raw) scale.

    denormalizer, when given, carries y_mean / y_scale arrays (length P);
    predictions and targets are mapped back to raw units before scoring.
    NLPD is the Gaussian moment-matched form described in the module
    docstring.
    """
    mean = pred.mean.detach().numpy() if torch.is_tensor(pred.mean) else np.asarray(pred.mean)
    var = pred.variance.detach().numpy() if torch.is_tensor(pred.variance) \
        else np.asarray(pred.variance)
    y = Y_test.detach().numpy() if torch.is_tensor(Y_test) else np.asarray(Y_test)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    y = np.asarray(y, dtype=float)
    if mean.shape != y.shape or var.shape != y.shape:
        raise ShapeMismatch(
            f"predictions {mean.shape}, variances {var.shape}, targets {y.shape} "
            "must all agree")
    if denormalizer is not None:
        y_mean = np.asarray(denormalizer.y_mean, dtype=float)
        y_scale = np.asarray(denormalizer.y_scale, dtype=float)
        mean = mean * y_scale + y_mean
        var = var * y_scale ** 2
        y = y * y_scale + y_mean
    err = mean - y
    nlpd_terms = _gaussian_nlpd(y, mean, var)
    p = y.shape[1]
    if site_ids is None:
        site_ids = [f"site_{i + 1}" for i in range(p)]
    return MetricReport(
        site_ids=list(site_ids),
        rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        mae=np.mean(np.abs(err), axis=0),
        nlpd=np.mean(nlpd_terms, axis=0),
        fvar=np.mean(var, axis=0),
        pooled_rmse=float(np.sqrt(np.mean(err ** 2))),
        pooled_mae=float(np.mean(np.abs(err))),
        pooled_nlpd=float(np.mean(nlpd_terms)),
        pooled_fvar=float(np.mean(var)),
    )
