"""Acceptance checks: one test per shipped guarantee.

Every test measures its property against an independent dense oracle or a
baseline, then records a single PASS/FAIL line (shown in the terminal
summary) before asserting.  Tolerances and budgets are part of the
contract; they are not tuned per machine.
"""

import math
import time

import numpy as np
import pytest
import torch

from stargp.cli import main as cli_main
from stargp.data import ingest_csv, synth_generate
from stargp.forecast import metrics, predict
from stargp.kernels import (
    Constant,
    DeltaCorrection,
    FeatureMatrix,
    Product,
    RBF,
    RickerWavelet,
    verify_implicit_sparsity,
)
from stargp.model import GroupPrior, build_solar_model, conditional_prior_batch
from stargp.star import StarCovariance, build_star_cholesky, build_winged_precision
from stargp.train import TrainConfig, fit
from stargp.variational import (
    MixturePosterior,
    build_context,
    build_contexts,
    cross_entropy,
    ell_minibatch,
    entropy_bound,
    indirect_sample,
    make_generator,
    marginal_posterior_at,
    marginal_posterior_batch,
)

from oracles import (
    densify_star_chol,
    densify_star_cov,
    densify_winged,
    gaussian_cross_entropy,
    gaussian_entropy,
    random_star_cov,
)
from test_variational import dense_cov_of, dense_l, make_group, post_for

_LINES = []


def check(label: str, ok: bool, detail: str):
    line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
    _LINES.append(line)
    print(line)
    assert ok, line


def test_a1_sparse_factor_and_inverse_match_dense():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_factor = 0.0
    worst_inverse = 0.0
    for _ in range(1000):
        q = int(rng.integers(2, 65))
        pv, cross, diag = random_star_cov(rng, q)
        cov = StarCovariance(pivot_var=pv, cross=cross, diag=diag)
        dense_k = densify_star_cov(pv, cross, diag)

        chol = build_star_cholesky(cov)
        got = densify_star_chol(chol.pivot_column.numpy(), chol.off_diag.numpy())
        ref = np.linalg.cholesky(dense_k)
        worst_factor = max(worst_factor, float(np.abs(got - ref).max()))

        prec = build_winged_precision(cov)
        dense_p = densify_winged(prec.pivot_scalar.item(), prec.wing.numpy(),
                                 prec.diag.numpy())
        resid = np.abs(dense_p @ dense_k - np.eye(q)).max()
        worst_inverse = max(worst_inverse, float(resid))
    elapsed = time.perf_counter() - t0
    ok = worst_factor <= 1e-10 and worst_inverse <= 1e-8 and elapsed < 10.0
    check("A1", ok,
          f"1000 random star covariances: factor err {worst_factor:.2e} "
          f"(tol 1e-10), inverse resid {worst_inverse:.2e} (tol 1e-8), "
          f"{elapsed:.2f}s (< 10s)")


def test_a2_separable_kernels_pass_rbf_fails():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    all_passed = True
    for _ in range(6):
        q = int(rng.integers(3, 13))
        h1 = FeatureMatrix(values=rng.uniform(-0.5, 0.5, size=(q, 1)))
        h2 = FeatureMatrix(values=rng.uniform(-0.4, 0.4, size=(q, 2)))
        cases = [(RickerWavelet(dilation=1.7), h1),
                 (RickerWavelet(dilation=[1.3, 2.1]), h2),
                 (Constant(value=1.9), h1)]
        for kernel, feats in cases:
            rep = verify_implicit_sparsity(kernel, feats)
            worst = max(worst, rep.max_violation)
            all_passed = all_passed and rep.passed
    h = FeatureMatrix(values=rng.uniform(-0.6, 0.6, size=(8, 1)))
    control = verify_implicit_sparsity(RBF(lengthscales=0.9, variance=1.1), h)
    elapsed = time.perf_counter() - t0
    ok = all_passed and worst <= 1e-10 and not control.passed \
        and control.max_violation > 1e-4 and elapsed < 5.0
    check("A2", ok,
          f"separable kernels max violation {worst:.2e} (tol 1e-10); "
          f"rbf control violates by {control.max_violation:.2e}; "
          f"{elapsed:.2f}s (< 5s)")


def test_a3_rank_one_degeneracy_and_delta_restoration():
    rng = np.random.default_rng(303)
    q = 6
    h = FeatureMatrix(values=rng.uniform(-0.6, 0.6, size=(q, 1)))
    core = RickerWavelet(dilation=1.5)
    gram = core.gram(h).detach().numpy()
    eig = np.linalg.eigvalsh(gram)
    rank_one = eig[-2] <= 1e-12 * eig[-1]

    sigma = 0.3
    g = GroupPrior(group_id=0, members=list(range(q)), sparsity_mode="implicit",
                   x_kernel=RBF(lengthscales=1.0, variance=1.0),
                   inducing_inputs=rng.uniform(-1, 1, size=(2, 1)),
                   h_kernel=Product([core, DeltaCorrection(variance=sigma ** 2)]),
                   h_features=h)
    ctx = build_context(g, 0)
    od = ctx.l_hh.off_diag.detach().numpy()
    od_err = float(np.abs(od - sigma).max())
    ok = rank_one and od_err <= 1e-12 and od.min() > 0
    check("A3", ok,
          f"separable gram rank-1 (eig2/eig1 {eig[-2] / eig[-1]:.1e}); "
          f"corrected factor off-diagonal = sigma to {od_err:.1e} (tol 1e-12)")


def test_a4_dense_equivalence_of_elbo_terms():
    worst = 0.0
    for mode in ("explicit", "implicit", "free"):
        for cov_type in ("kronecker", "diagonal"):
            for q, m, seed in [(2, 2, 11), (3, 3, 12)]:
                g = make_group(mode, q=q, m=m, seed=seed)
                post = post_for([g], cov_type=cov_type, seed=100 + seed)
                ctx = build_context(g, 0)
                cell = post.cell(0, 0)
                k_hh = dense_l(ctx.l_hh)
                k_hh = k_hh @ k_hh.T
                k_zz = (ctx.zz_chol @ ctx.zz_chol.T).detach().numpy()
                prior = np.kron(k_hh, k_zz)
                s_dense = dense_cov_of(cell)

                ent_ref = gaussian_entropy(s_dense)
                worst = max(worst, abs(entropy_bound(post).item() - ent_ref))
                ce_ref = -gaussian_cross_entropy(cell.mean.detach().numpy(),
                                                 s_dense, prior)
                worst = max(worst, abs(cross_entropy(post, [ctx]).item() - ce_ref))

                rng = np.random.default_rng(900 + seed)
                X = rng.uniform(-2, 2, size=(4, 1))
                a, kt = conditional_prior_batch(g, X, ctx.zz_chol)
                marg = marginal_posterior_batch(post, ctx, a, kt, 0)
                for n in range(X.shape[0]):
                    a_big = np.kron(np.eye(q), a[n].detach().numpy().reshape(1, -1))
                    mean_ref = a_big @ cell.mean.detach().numpy()
                    cov_ref = kt[n].item() * k_hh + a_big @ s_dense @ a_big.T
                    worst = max(worst, float(np.abs(
                        marg.mean[n].detach().numpy() - mean_ref).max()))
                    if cov_type == "kronecker":
                        lb = dense_l(marg.l_sb)
                        cov_got = kt[n].item() * k_hh \
                            + marg.w_scalar[n].item() * (lb @ lb.T)
                    else:
                        cov_got = kt[n].item() * k_hh \
                            + np.diag(marg.w_diag[n].detach().numpy())
                    worst = max(worst, float(np.abs(cov_got - cov_ref).max()))
    ok = worst <= 1e-8
    check("A4", ok,
          f"entropy/cross-entropy/marginals vs dense evaluation, all modes "
          f"and both posteriors: max abs err {worst:.2e} (tol 1e-8)")


def _autograd_vector(value_fn, params) -> np.ndarray:
    for p in params:
        p.grad = None
    value_fn().backward()
    chunks = []
    for p in params:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        chunks.append(g.detach().reshape(-1).clone())
    return torch.cat(chunks).numpy()


def _fd_vector(value_fn, params, h: float = 1e-5) -> np.ndarray:
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = value_fn().item()
                flat[i] = orig - h
                down = value_fn().item()
                flat[i] = orig
                out.append((up - down) / (2.0 * h))
    return np.array(out)


def test_a5_gradients_match_finite_differences():
    t0 = time.perf_counter()
    groups = [make_group("free", q=2, m=2, seed=21, group_id=0),
              make_group("implicit", q=2, m=2, seed=22, group_id=1,
                         members=[2, 3])]
    post = post_for(groups, cov_type="kronecker", seed=23)
    params = [p for g in groups for p in g.parameters()] + list(post.parameters())

    def reg_terms():
        ctxs = [build_context(g, i) for i, g in enumerate(groups)]
        return entropy_bound(post) + cross_entropy(post, ctxs)

    an = _autograd_vector(reg_terms, params)
    fd = _fd_vector(reg_terms, params)
    rel_reg = np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)

    rng = np.random.default_rng(24)
    model = build_solar_model([0.0, 1.0], rng.uniform(-2, 2, size=(20, 2)),
                              m_inducing=3, sparsity_mode="explicit", seed=25)
    post2 = MixturePosterior.build(model, 1, "kronecker", init_mean_std=0.3,
                                   seed=26)
    X = torch.tensor(rng.uniform(-1.5, 1.5, size=(6, 2)), dtype=torch.float64)
    Y = torch.tensor(rng.normal(size=(6, 2)), dtype=torch.float64)
    params2 = list(model.parameters()) + list(post2.parameters())

    def ell_term():
        # fixed seed keys: the same normal draws at every evaluation, so
        # finite differences see a smooth deterministic function
        return ell_minibatch(model, post2, build_contexts(model), X, Y,
                             n_total=6, n_samples=4, seed_keys=(9, 1))

    an2 = _autograd_vector(ell_term, params2)
    fd2 = _fd_vector(ell_term, params2)
    rel_ell = np.linalg.norm(an2 - fd2) / max(np.linalg.norm(fd2), 1e-12)
    elapsed = time.perf_counter() - t0
    ok = rel_reg <= 1e-4 and rel_ell <= 1e-3 and elapsed < 60.0
    check("A5", ok,
          f"entropy+cross-entropy grad rel err {rel_reg:.2e} (tol 1e-4); "
          f"common-random-numbers likelihood grad rel err {rel_ell:.2e} "
          f"(tol 1e-3); {elapsed:.1f}s (< 60s)")


def test_a6_indirect_sampling_matches_dense_sampling():
    n_draws = 100000
    worst_z = 0.0
    g = make_group("explicit", q=3, m=3, seed=41)
    for idx, cov_type in enumerate(("kronecker", "diagonal")):
        post = post_for([g], cov_type=cov_type, seed=42 + idx)
        ctx = build_context(g, 0)
        marg = marginal_posterior_at(post, ctx, np.array([0.35]), component=0)
        draws = indirect_sample(marg, make_generator(44, idx),
                                n_draws).detach().numpy()

        k_hh = dense_l(ctx.l_hh)
        k_hh = k_hh @ k_hh.T
        if cov_type == "kronecker":
            lb = dense_l(marg.l_sb)
            cov_ref = marg.k_tilde[0].item() * k_hh \
                + marg.w_scalar[0].item() * (lb @ lb.T)
        else:
            cov_ref = marg.k_tilde[0].item() * k_hh \
                + np.diag(marg.w_diag[0].detach().numpy())
        mean_ref = marg.mean[0].detach().numpy()
        direct = np.random.default_rng(45 + idx).multivariate_normal(
            mean_ref, cov_ref, size=n_draws, method="cholesky")

        # each moment is estimated from n_draws samples on both routes, so
        # the difference has sqrt(2) times the single-estimate standard error
        se_mean = np.sqrt(2.0 * np.diag(cov_ref) / n_draws)
        z_mean = np.abs(draws.mean(0) - direct.mean(0)) / se_mean
        cov_a = np.cov(draws.T)
        cov_b = np.cov(direct.T)
        se_cov = np.sqrt(2.0 * (np.outer(np.diag(cov_ref), np.diag(cov_ref))
                                + cov_ref ** 2) / n_draws)
        z_cov = np.abs(cov_a - cov_b) / se_cov
        worst_z = max(worst_z, float(z_mean.max()), float(z_cov.max()))
    ok = worst_z <= 3.0
    check("A6", ok,
          f"sparse-route sample moments vs dense direct sampling at "
          f"{n_draws} draws: worst deviation {worst_z:.2f} standard errors "
          f"(limit 3)")


def _marginal_bytes(marg) -> int:
    total = 0
    for name in ("mean", "k_tilde", "w_scalar", "w_diag"):
        t = getattr(marg, name)
        if t is not None:
            total += t.numel() * t.element_size()
    for name in ("l_hh", "l_sb"):
        f = getattr(marg, name)
        if f is not None:
            total += (f.pivot_column.numel() + f.off_diag.numel()) \
                * f.pivot_column.element_size()
    return total


def test_a7_group_algebra_scales_linearly_in_group_size():
    times = {}
    mems = {}
    x_batch = np.linspace(-2.0, 2.0, 32).reshape(-1, 1)
    for q in (64, 128):
        g = make_group("free", q=q, m=8, seed=50)
        post = post_for([g], cov_type="kronecker", seed=51)

        def step():
            ctx = build_context(g, 0)
            return (entropy_bound(post) + cross_entropy(post, [ctx])).item()

        step()
        times[q] = min(_timed(step) for _ in range(30))

        ctx = build_context(g, 0)
        a, kt = conditional_prior_batch(g, x_batch, ctx.zz_chol)
        mems[q] = _marginal_bytes(marginal_posterior_batch(post, ctx, a, kt, 0))
    time_ratio = times[128] / times[64]
    mem_ratio = mems[128] / mems[64]
    ok = time_ratio <= 3.0 and mem_ratio <= 2.2
    check("A7", ok,
          f"per-step group algebra 128 vs 64 functions: time x{time_ratio:.2f} "
          f"(limit 3.0, fixed M=8); marginal-structure memory x{mem_ratio:.2f} "
          f"per doubling (limit 2.2)")


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _pooled_nlpd(y, mean, var) -> float:
    return float(np.mean(0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var)))


def test_a8_learns_past_mean_and_persistence_baselines(tmp_path):
    t0 = time.perf_counter()
    synth_generate(str(tmp_path / "d"), p=4, n=2000, seed=17, noise_std=0.3)
    ds = ingest_csv(str(tmp_path / "d" / "data.csv"), horizon=1, lags=2)
    n_train = 1600
    X_tr, Y_tr = ds.X[:n_train], ds.Y[:n_train]
    X_te, Y_te = ds.X[n_train:], ds.Y[n_train:]

    # the raw-hours time column starts near-inert (test rows sit in the
    # future); lag columns carry the signal
    model = build_solar_model(np.arange(4.0), X_tr, m_inducing=16,
                              sparsity_mode="explicit", seed=5,
                              x_lengthscale=[1000.0] + [2.0] * 8)
    post = MixturePosterior.build(model, 1, "kronecker", seed=5)
    cfg = TrainConfig(learning_rate=0.02, batch_size=500, max_epochs=120,
                      mc_samples_train=10, mc_samples_eval=25, seed=5,
                      checkpoint_every=1000)
    report = fit(model, post, X_tr, Y_tr, cfg)
    summary = predict(model, post, X_te, n_samples=256, seed=29)
    rep = metrics(summary, Y_te, denormalizer=ds.norm, site_ids=ds.site_ids)

    # baselines on the raw scale
    y_tr = Y_tr * ds.norm.y_scale + ds.norm.y_mean
    y_te = Y_te * ds.norm.y_scale + ds.norm.y_mean
    x_raw_tr = X_tr * ds.norm.x_scale + ds.norm.x_mean
    x_raw_te = X_te * ds.norm.x_scale + ds.norm.x_mean
    lag0 = [1 + i * ds.lags for i in range(ds.p)]
    pers_tr = x_raw_tr[:, lag0]
    pers_te = x_raw_te[:, lag0]

    mu = y_tr.mean(axis=0)
    var_mean = y_tr.var(axis=0)
    rmse_mean = float(np.sqrt(np.mean((y_te - mu) ** 2)))
    nlpd_mean = _pooled_nlpd(y_te, mu, var_mean)
    var_pers = (y_tr - pers_tr).var(axis=0)
    rmse_pers = float(np.sqrt(np.mean((y_te - pers_te) ** 2)))
    nlpd_pers = _pooled_nlpd(y_te, pers_te, var_pers)

    elapsed = time.perf_counter() - t0
    improved = report.elbos[-1] > report.elbos[0]
    ok = (report.epochs_run <= 200 and improved
          and rep.pooled_rmse < rmse_mean and rep.pooled_rmse < rmse_pers
          and rep.pooled_nlpd < nlpd_mean and rep.pooled_nlpd < nlpd_pers
          and elapsed < 600.0)
    check("A8", ok,
          f"{report.epochs_run} epochs ({report.stop_reason}): model rmse "
          f"{rep.pooled_rmse:.4f} vs mean {rmse_mean:.4f} / persistence "
          f"{rmse_pers:.4f}; nlpd {rep.pooled_nlpd:.3f} vs {nlpd_mean:.3f} / "
          f"{nlpd_pers:.3f}; elbo {report.elbos[0]:.1f} -> "
          f"{report.elbos[-1]:.1f}; {elapsed:.0f}s (< 600s)")


def test_a9_prediction_time_near_linear_in_tasks():
    rng = np.random.default_rng(71)
    x_train = rng.uniform(-2, 2, size=(400, 5))
    x_test = rng.uniform(-2, 2, size=(256, 5))
    times = {}
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # stable wall-clock on shared machines
    try:
        for p in (25, 50):
            model = build_solar_model(np.arange(float(p)), x_train,
                                      m_inducing=200,
                                      sparsity_mode="explicit", seed=7)
            post = MixturePosterior.build(model, 1, "kronecker", seed=7)

            def run():
                predict(model, post, x_test, n_samples=4, seed=3,
                        chunk_size=256)

            run()
            times[p] = min(_timed(run) for _ in range(5))
    finally:
        torch.set_num_threads(old_threads)
    ratio = times[50] / times[25]
    ok = ratio <= 3.0
    check("A9", ok,
          f"full-test prediction time, 50 vs 25 sites: "
          f"{times[25] * 1e3:.0f}ms -> {times[50] * 1e3:.0f}ms, "
          f"x{ratio:.2f} (limit 3.0)")


def test_a10_reruns_are_bit_identical(tmp_path):
    synth_generate(str(tmp_path / "d"), p=2, n=140, seed=13, noise_std=0.05)
    cfg = tmp_path / "run.yaml"
    cfg.write_text("""
data:
  train_csv: d/data.csv
  horizon: 1
  lags: 2
model:
  inducing_count: 5
train:
  learning_rate: 0.02
  max_epochs: 3
  batch_size: 64
  mc_samples_train: 4
  mc_samples_eval: 8
  checkpoint_every: 2
  seed: 21
""")
    artifacts = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["train", "--config", str(cfg),
                         "--out-dir", str(out)]) == 0
        pred = tmp_path / f"pred_{run}.csv"
        assert cli_main(["predict", "--checkpoint",
                         str(out / "checkpoint_final.txt"),
                         "--data", str(tmp_path / "d" / "data.csv"),
                         "--out", str(pred), "--samples", "32"]) == 0
        artifacts[run] = {
            "trace": (out / "train_report.csv").read_bytes(),
            "ckpt": (out / "checkpoint_final.txt").read_bytes(),
            "mid_ckpt": (out / "checkpoint_0002.txt").read_bytes(),
            "pred": pred.read_bytes(),
        }
    same = {k: artifacts["a"][k] == artifacts["b"][k] for k in artifacts["a"]}
    ok = all(same.values())
    check("A10", ok,
          "two identically seeded runs: elbo trace, checkpoints, and "
          f"prediction csv all bit-identical ({same})" if not ok else
          "two identically seeded runs: elbo trace, checkpoints, and "
          "prediction csv are bit-identical")
