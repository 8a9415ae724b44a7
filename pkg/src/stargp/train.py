"""Adam training loop, checkpointing, and timing instrumentation.

All parameters (kernel hyperparameters, inducing inputs, variational
parameters, noise) are optimized jointly.  Every random decision is keyed to
(seed, epoch, batch) substreams, so two runs with the same config produce
bit-identical traces and checkpoints.

Checkpoints are versioned plain text: config echo, group layout, every
parameter array in row-major decimal with 17 significant digits (exact
float64 round-trip), and the RNG bookkeeping needed to identify the run.
Writes go through a temp file + rename so a crash never leaves a torn file.
"""

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import torch

from .errors import (
    ConfigError,
    DegenerateCovariance,
    DegenerateFactor,
    DimensionMismatch,
    NegativeScalar,
    NegativeSchur,
    NonFiniteElbo,
    NonPositivePivot,
    SingularInducingGram,
)
from .model import GgpModel
from .star import DTYPE, star_factor_batch, star_logdet_batch
from .util import atomic_write_text
from .variational import MixturePosterior, elbo, make_generator

# substream tags so evaluation / benchmark draws never collide with the
# (seed, epoch, batch, group) training streams
EVAL_STREAM = 0xE7A1
BENCH_STREAM = 0xBE9C

# numeric failures that the one-time learning-rate halving may recover from;
# near-degenerate wavelet grams early in training are the usual culprit
_RECOVERABLE = (
    NonFiniteElbo,
    NonPositivePivot,
    NegativeSchur,
    DegenerateFactor,
    DegenerateCovariance,
    NegativeScalar,
    SingularInducingGram,
)

PRESETS = {"paper-2019": {"beta1": 0.09}}

CHECKPOINT_HEADER = "stargp checkpoint format 1"


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 256
    max_epochs: int = 200
    max_wall_time: float = 20.0 * 3600.0
    rel_tol: float = 1e-5
    mc_samples_train: int = 20
    mc_samples_eval: int = 200
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if not 0.0 < self.rel_tol < 1.0:
            raise ConfigError(f"rel_tol must be in (0, 1), got {self.rel_tol}")
        for name in ("batch_size", "mc_samples_train", "mc_samples_eval",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.max_wall_time <= 0:
            raise ConfigError(f"max_wall_time must be positive, got {self.max_wall_time}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw or {})
        preset = raw.pop("preset", None)
        values = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown train preset {preset!r}; "
                                  f"available: {sorted(PRESETS)}")
            values.update(PRESETS[preset])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        values.update(raw)
        return cls(**values)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    """Per-epoch ELBO trace plus the timing breakdown.

    elbos[0] is the ELBO at initialization; one entry follows per completed
    epoch.  Timing means exclude evaluation and checkpoint I/O.
    """

    elbos: list
    epochs_run: int
    stop_reason: str
    step_time_mean: float
    eval_time_mean: float
    checkpoint_paths: list = field(default_factory=list)
    lr_halved: bool = False


def _snapshot(model, post):
    return ({k: v.detach().clone() for k, v in model.state_dict().items()},
            {k: v.detach().clone() for k, v in post.state_dict().items()})


def _restore(model, post, snap):
    model.load_state_dict(snap[0])
    post.load_state_dict(snap[1])


def fit(model: GgpModel, post: MixturePosterior, X, Y, cfg: TrainConfig,
        out_dir=None, run_config=None, norm=None) -> TrainReport:
    """Run Adam on the stochastic ELBO until convergence or a cap.

    Stops when the relative ELBO change over successive epochs drops below
    cfg.rel_tol, or at max_epochs, or at the wall-time cap (checked at epoch
    granularity).  Checkpoints every cfg.checkpoint_every epochs into
    out_dir when given, plus a final checkpoint.

    On a non-finite ELBO or a numeric failure the parameters are rolled
    back to the last good epoch and the learning rate is halved once
    (optimizer moments reset); a second failure aborts with the last good
    state checkpointed.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if Y.shape[1] != model.structure.tasks:
        raise DimensionMismatch(
            f"Y has {Y.shape[1]} columns for a {model.structure.tasks}-task model")
    n = X.shape[0]
    batch_size = min(cfg.batch_size, n)
    params = list(model.parameters()) + list(post.parameters())
    lr = cfg.learning_rate
    opt = torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))

    step_times, eval_times = [], []
    checkpoint_paths = []
    lr_halved = False
    t_start = time.monotonic()

    def eval_elbo(epoch_tag: int) -> float:
        t0 = time.perf_counter()
        with torch.no_grad():
            value = elbo(model, post, X, Y, n_total=n,
                         n_samples=cfg.mc_samples_eval,
                         seed_keys=(cfg.seed, EVAL_STREAM, epoch_tag)).total.item()
        eval_times.append(time.perf_counter() - t0)
        return value

    def write_checkpoint(name: str, epochs_completed: int):
        if out_dir is None:
            return
        path = os.path.join(out_dir, name)
        save_checkpoint(path, model, post, seed=cfg.seed,
                        epochs_completed=epochs_completed,
                        config=run_config or {"train": cfg.as_dict()},
                        norm=norm)
        checkpoint_paths.append(path)

    elbo0 = eval_elbo(0)
    if not math.isfinite(elbo0):
        raise NonFiniteElbo(f"ELBO is {elbo0} at initialization")
    elbos = [elbo0]
    good = _snapshot(model, post)
    good_epoch = 0

    stop_reason = "zero_epochs" if cfg.max_epochs == 0 else "max_epochs"
    epoch = 1
    while epoch <= cfg.max_epochs:
        if time.monotonic() - t_start > cfg.max_wall_time:
            stop_reason = "wall_time"
            break
        perm = torch.randperm(n, generator=make_generator(cfg.seed, epoch))
        try:
            for bi, chunk in enumerate(torch.split(perm, batch_size)):
                t0 = time.perf_counter()
                opt.zero_grad()
                out = elbo(model, post, X[chunk], Y[chunk], n_total=n,
                           n_samples=cfg.mc_samples_train,
                           seed_keys=(cfg.seed, epoch, bi))
                loss = -out.total
                if not torch.isfinite(loss):
                    raise NonFiniteElbo(f"ELBO non-finite at epoch {epoch} batch {bi}")
                loss.backward()
                opt.step()
                step_times.append(time.perf_counter() - t0)
            value = eval_elbo(epoch)
            if not math.isfinite(value):
                raise NonFiniteElbo(f"full ELBO non-finite after epoch {epoch}")
        except _RECOVERABLE as err:
            _restore(model, post, good)
            if lr_halved:
                write_checkpoint("checkpoint_abort.txt", good_epoch)
                raise NonFiniteElbo(
                    f"training failed again after halving the learning rate "
                    f"({err}); last good state is epoch {good_epoch}") from err
            lr_halved = True
            lr = lr / 2.0
            opt = torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))
            continue   # retry the same epoch index from the rolled-back state
        elbos.append(value)
        good = _snapshot(model, post)
        good_epoch = epoch
        if epoch % cfg.checkpoint_every == 0:
            write_checkpoint(f"checkpoint_{epoch:04d}.txt", epoch)
        rel = abs(elbos[-1] - elbos[-2]) / max(abs(elbos[-2]), 1e-300)
        if rel < cfg.rel_tol:
            stop_reason = "converged"
            epoch += 1
            break
        epoch += 1

    epochs_run = len(elbos) - 1
    write_checkpoint("checkpoint_final.txt", epochs_run)
    return TrainReport(
        elbos=elbos,
        epochs_run=epochs_run,
        stop_reason=stop_reason,
        step_time_mean=sum(step_times) / len(step_times) if step_times else 0.0,
        eval_time_mean=sum(eval_times) / len(eval_times) if eval_times else 0.0,
        checkpoint_paths=checkpoint_paths,
        lr_halved=lr_halved,
    )


def _format_array(t: torch.Tensor) -> str:
    return " ".join(f"{x:.17g}" for x in t.detach().reshape(-1).tolist())


def _named_params(model, post):
    for prefix, module in (("model", model), ("post", post)):
        for name, p in module.named_parameters():
            yield f"{prefix}.{name}", p


def save_checkpoint(path, model: GgpModel, post: MixturePosterior, *, seed: int,
                    epochs_completed: int, config=None, norm=None):
    lines = [CHECKPOINT_HEADER, "[state]",
             f"seed = {int(seed)}",
             f"epochs_completed = {int(epochs_completed)}",
             "[config]", json.dumps(config or {}, sort_keys=True),
             "[norm]", json.dumps(norm, sort_keys=True),
             "[layout]",
             f"tasks = {model.structure.tasks}",
             f"nodes = {model.structure.nodes}"]
    for g in model.groups:
        lines.append("group = " + json.dumps(
            {"id": g.group_id, "members": list(g.members),
             "mode": g.sparsity_mode, "m": g.m}, sort_keys=True))
    for name, p in _named_params(model, post):
        lines.append(f"[param {name}]")
        lines.append("shape = " + " ".join(str(s) for s in p.shape))
        lines.append(_format_array(p))
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    seed: int
    epochs_completed: int
    config: dict
    norm: object
    layout: dict
    params: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path) as handle:
        lines = [ln.rstrip("\n") for ln in handle]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ConfigError(f"{path}: not a recognized checkpoint "
                          f"(expected first line {CHECKPOINT_HEADER!r})")
    state = {}
    config = {}
    norm = None
    layout = {"groups": []}
    params = {}
    section = None
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("[param "):
            name = line[len("[param "):-1]
            shape_line = lines[i + 1]
            if not shape_line.startswith("shape = "):
                raise ConfigError(f"{path}: malformed parameter block for {name}")
            shape = tuple(int(s) for s in shape_line[len("shape = "):].split())
            data = [float(v) for v in lines[i + 2].split()]
            params[name] = torch.tensor(data, dtype=DTYPE).reshape(shape)
            i += 3
            continue
        if line.startswith("["):
            section = line.strip("[]")
            i += 1
            continue
        if section == "state" and " = " in line:
            k, v = line.split(" = ", 1)
            state[k] = int(v)
        elif section == "config" and line:
            config = json.loads(line)
        elif section == "norm" and line:
            norm = json.loads(line)
        elif section == "layout" and " = " in line:
            k, v = line.split(" = ", 1)
            if k == "group":
                layout["groups"].append(json.loads(v))
            else:
                layout[k] = int(v)
        i += 1
    return Checkpoint(seed=state.get("seed", 0),
                      epochs_completed=state.get("epochs_completed", 0),
                      config=config, norm=norm, layout=layout, params=params)


def apply_checkpoint(model: GgpModel, post: MixturePosterior, ckpt: Checkpoint):
    """Load checkpoint parameters into freshly built modules, strictly."""
    if ckpt.layout.get("tasks") != model.structure.tasks \
            or ckpt.layout.get("nodes") != model.structure.nodes:
        raise ConfigError(
            f"checkpoint layout ({ckpt.layout.get('tasks')} tasks, "
            f"{ckpt.layout.get('nodes')} nodes) does not match the model "
            f"({model.structure.tasks}, {model.structure.nodes})")
    own = dict(_named_params(model, post))
    missing = set(own) - set(ckpt.params)
    extra = set(ckpt.params) - set(own)
    if missing or extra:
        raise ConfigError(f"checkpoint parameter mismatch; missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            value = ckpt.params[name]
            if value.shape != p.shape:
                raise DimensionMismatch(
                    f"checkpoint param {name} has shape {tuple(value.shape)}, "
                    f"model expects {tuple(p.shape)}")
            p.copy_(value)


def star_microbench(q: int = 100, batch: int = 64, reps: int = 7) -> dict:
    """Sparse vs dense factor+logdet throughput on a batch of random star
    covariances; returns best-of-reps per-batch seconds and the ratio."""
    gen = make_generator(BENCH_STREAM, q, batch)
    pv = 1.5 + torch.rand(batch, dtype=DTYPE, generator=gen)
    cross = torch.rand(batch, q - 1, dtype=DTYPE, generator=gen) - 0.5
    diag = cross.square() / pv[:, None] + 0.3 \
        + torch.rand(batch, q - 1, dtype=DTYPE, generator=gen)
    dense = torch.zeros(batch, q, q, dtype=DTYPE)
    dense[:, 0, 0] = pv
    dense[:, 0, 1:] = cross
    dense[:, 1:, 0] = cross
    dense[:, 1:, 1:] = torch.einsum("bi,bj->bij", cross, cross) / pv[:, None, None]
    idx = torch.arange(1, q)
    dense[:, idx, idx] = diag

    def sparse_route():
        cols, ods = star_factor_batch(pv, cross, diag)
        return star_logdet_batch(cols, ods)

    def dense_route():
        chol = torch.linalg.cholesky(dense)
        return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)

    if (sparse_route() - dense_route()).abs().max().item() > 1e-8:
        raise AssertionError("microbench routes disagree")
    times = {}
    for name, f in (("sparse", sparse_route), ("dense", dense_route)):
        best = math.inf
        for _ in range(reps):
            t0 = time.perf_counter()
            f()
            best = min(best, time.perf_counter() - t0)
        times[name] = best
    return {"q": q, "batch": batch, "sparse_s": times["sparse"],
            "dense_s": times["dense"],
            "ratio": times["dense"] / times["sparse"]}


def benchmark(model: GgpModel, post: MixturePosterior, X, Y, cfg: TrainConfig,
              x_test=None, steps: int = 5, repeats: int = 3) -> list:
    """Measure step / full-ELBO / prediction times after warmup.

    Returns a list of row dicts ready for CSV; includes the sparse-vs-dense
    factorization microbench.
    """
    from .forecast import predict   # deferred: forecast imports this module's peers

    X = torch.as_tensor(X, dtype=DTYPE)
    Y = torch.as_tensor(Y, dtype=DTYPE)
    n = X.shape[0]
    batch_size = min(cfg.batch_size, n)
    params = list(model.parameters()) + list(post.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    chunks = list(torch.split(torch.arange(n), batch_size))

    def one_step(i):
        opt.zero_grad()
        out = elbo(model, post, X[chunks[i % len(chunks)]], Y[chunks[i % len(chunks)]],
                   n_total=n, n_samples=cfg.mc_samples_train,
                   seed_keys=(cfg.seed, BENCH_STREAM, i))
        (-out.total).backward()
        opt.step()

    one_step(0)   # warmup
    t0 = time.perf_counter()
    for i in range(1, steps + 1):
        one_step(i)
    step_time = (time.perf_counter() - t0) / steps

    with torch.no_grad():
        elbo(model, post, X, Y, n_total=n, n_samples=cfg.mc_samples_eval,
             seed_keys=(cfg.seed, BENCH_STREAM, steps + 1))
        t0 = time.perf_counter()
        for _ in range(repeats):
            elbo(model, post, X, Y, n_total=n, n_samples=cfg.mc_samples_eval,
                 seed_keys=(cfg.seed, BENCH_STREAM, steps + 1))
        elbo_time = (time.perf_counter() - t0) / repeats

    x_eval = X if x_test is None else torch.as_tensor(x_test, dtype=DTYPE)
    predict(model, post, x_eval, n_samples=cfg.mc_samples_eval, seed=cfg.seed)
    t0 = time.perf_counter()
    for _ in range(repeats):
        predict(model, post, x_eval, n_samples=cfg.mc_samples_eval, seed=cfg.seed)
    predict_time = (time.perf_counter() - t0) / repeats

    micro = star_microbench()
    return [
        {"metric": "step_time_s", "value": step_time},
        {"metric": "full_elbo_time_s", "value": elbo_time},
        {"metric": "predict_time_s", "value": predict_time},
        {"metric": "microbench_sparse_s", "value": micro["sparse_s"]},
        {"metric": "microbench_dense_s", "value": micro["dense_s"]},
        {"metric": "microbench_ratio", "value": micro["ratio"]},
    ]
