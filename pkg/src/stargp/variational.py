"""Variational family, ELBO components, and indirect sampling.

The posterior over all inducing values is a mixture of K Gaussians that
factorizes over groups.  Each (component, group) cell holds a free mean of
length M*Q_r (stored row-major as Q_r blocks of M) and a covariance that is
either diagonal or a Kronecker product S_b (x) S_w of two star-factored
pieces.  K > 1 is only supported with diagonal covariance.

The three ELBO terms are computed without ever materializing a Q_r*M
matrix:

- entropy: exact for K = 1 (Kronecker log dets split into M log|S_b| +
  Q_r log|S_w|); for K > 1 the standard pairwise lower bound on mixture
  entropy, O(K^2) Gaussian evaluations on diagonal covariances.
- cross-entropy vs the prior: per group, a constant, the Kronecker log det,
  the quadratic form m' (Lambda_hh (x) K_zz^-1) m at O(Q_r M) after one
  M x M solve, and a trace that collapses to products of O(Q_r) and O(M)
  pieces.
- expected log-likelihood: minibatch Monte Carlo with per-point marginals
  sampled indirectly (two cheap draws whose sum has the right covariance).

Everything is a pure function of (parameters, inputs, seed); random streams
are derived per (seed, epoch, batch, group) so runs are bit-reproducible.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    DimensionMismatch,
    NegativeScalar,
    UnsupportedCombination,
)
from .model import FreeCholParams, GgpModel, GroupPrior, conditional_prior_batch
from .star import (
    DTYPE,
    SparseStarCholesky,
    WingedPrecision,
    kron_logdet,
    star_logdet,
    star_matmul_vec,
    winged_diag,
    winged_from_cholesky,
    winged_matvec,
    winged_star_trace,
)

LOG_2PI = math.log(2.0 * math.pi)
LOG_2PI_E = LOG_2PI + 1.0

# added under sqrt before sampling so the gradient stays finite when a
# variance is exactly 0 (point at an inducing input); shifts the sampled
# standard deviation by at most 1e-8
SAMPLE_VAR_FLOOR = 1e-16


def make_generator(*keys) -> torch.Generator:
    """Independent torch RNG stream addressed by a tuple of integers.

    The first key is the run seed, the rest identify the substream
    (epoch, batch, group, ...).  Mixing goes through numpy's SeedSequence
    so nearby keys give uncorrelated streams.
    """
    if not keys:
        raise ValueError("need at least a seed key")
    ss = np.random.SeedSequence(entropy=int(keys[0]) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(k) & 0xFFFFFFFF for k in keys[1:]))
    state = ss.generate_state(2, np.uint32)
    seed = (int(state[0]) << 32 | int(state[1])) & 0x7FFFFFFFFFFFFFFF
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


class DiagonalCov(nn.Module):
    """Diagonal covariance over one (component, group) cell, log-stored."""

    def __init__(self, dim: int, init_var: float = 1e-2):
        super().__init__()
        self.dim = dim
        self.log_values = nn.Parameter(torch.full((dim,), math.log(init_var), dtype=DTYPE))

    def values(self) -> Tensor:
        return torch.exp(self.log_values)

    def logdet(self) -> Tensor:
        return self.log_values.sum()


class KroneckerCov(nn.Module):
    """S = S_b (x) S_w with both factors star-structured.

    S_b spans the Q_r functions in the group, S_w the M inducing values.
    For singleton groups S_b is pinned to the scalar 1, removing the scale
    redundancy between the two factors.
    """

    def __init__(self, q_r: int, m: int, init_scale: float = 0.1):
        super().__init__()
        self.q_r = q_r
        self.m = m
        self.dim = q_r * m
        self.s_b = FreeCholParams(q_r, init_cross=0.0) if q_r > 1 else None
        self.s_w = FreeCholParams(m, init_cross=0.0, init_scale=init_scale)

    def factors(self):
        if self.s_b is None:
            l_b = SparseStarCholesky(pivot_column=torch.ones(1, dtype=DTYPE),
                                     off_diag=torch.zeros(0, dtype=DTYPE))
        else:
            l_b = self.s_b.decode()
        return l_b, self.s_w.decode()

    def logdet(self) -> Tensor:
        l_b, l_w = self.factors()
        return kron_logdet(star_logdet(l_b), self.q_r, star_logdet(l_w), self.m)


class GroupPosterior(nn.Module):
    """Mean and covariance for one (component, group) cell."""

    def __init__(self, q_r: int, m: int, cov, mean=None):
        super().__init__()
        self.q_r = q_r
        self.m = m
        self.dim = q_r * m
        if cov.dim != self.dim:
            raise DimensionMismatch(f"covariance dim {cov.dim} != Q_r*M = {self.dim}")
        if mean is None:
            mean = torch.zeros(self.dim, dtype=DTYPE)
        mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
        if mean.shape[0] != self.dim:
            raise DimensionMismatch(f"mean length {mean.shape[0]} != Q_r*M = {self.dim}")
        self.mean = nn.Parameter(mean)
        self.cov = cov

    def mean_matrix(self) -> Tensor:
        """Mean reshaped (Q_r, M): one row of inducing values per function."""
        return self.mean.reshape(self.q_r, self.m)


class MixturePosterior(nn.Module):
    """K-component mixture over all groups; weights live as free log-weights."""

    def __init__(self, cells, init_log_weights=None):
        super().__init__()
        if not cells or not cells[0]:
            raise DimensionMismatch("posterior needs at least one component and one group")
        k = len(cells)
        if any(len(row) != len(cells[0]) for row in cells):
            raise DimensionMismatch("all components must cover the same groups")
        if k > 1:
            for row in cells:
                for cell in row:
                    if not isinstance(cell.cov, DiagonalCov):
                        raise UnsupportedCombination(
                            "mixtures with K > 1 are only supported with diagonal "
                            "covariances; Kronecker factors are K = 1 only")
        self.components = nn.ModuleList(nn.ModuleList(row) for row in cells)
        if init_log_weights is None:
            init_log_weights = torch.zeros(k, dtype=DTYPE)
        self.log_weights = nn.Parameter(torch.as_tensor(init_log_weights, dtype=DTYPE))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def n_groups(self) -> int:
        return len(self.components[0])

    def weights(self) -> Tensor:
        return torch.softmax(self.log_weights, dim=0)

    def cell(self, k: int, r: int) -> GroupPosterior:
        return self.components[k][r]

    @staticmethod
    def build(model: GgpModel, n_components: int = 1, cov_type: str = "kronecker",
              init_var: float = 1e-2, init_mean_std: float = 0.01, seed: int = 0):
        if cov_type not in ("kronecker", "diagonal"):
            raise UnsupportedCombination(f"unknown covariance type {cov_type!r}")
        if cov_type == "kronecker" and n_components > 1:
            raise UnsupportedCombination(
                "mixtures with K > 1 are only supported with diagonal covariances")
        gen = make_generator(seed, 0xC0175)
        cells = []
        for k in range(n_components):
            row = []
            for g in model.groups:
                if cov_type == "diagonal":
                    cov = DiagonalCov(g.q_r * g.m, init_var=init_var)
                else:
                    cov = KroneckerCov(g.q_r, g.m, init_scale=math.sqrt(init_var))
                mean = init_mean_std * torch.randn(g.q_r * g.m, dtype=DTYPE, generator=gen)
                row.append(GroupPosterior(g.q_r, g.m, cov, mean=mean))
            cells.append(row)
        return MixturePosterior(cells)


@dataclass
class GroupContext:
    """Per-step cache of everything derived from one group's parameters."""

    index: int
    gp: GroupPrior
    zz_chol: Tensor
    l_hh: SparseStarCholesky
    prec_hh: WingedPrecision
    logdet_hh: Tensor
    logdet_zz: Tensor
    kzz_inv: Tensor

    @property
    def kzz_inv_diag(self) -> Tensor:
        return torch.diagonal(self.kzz_inv)


def build_context(gp: GroupPrior, index: int = 0) -> GroupContext:
    zz_chol = gp.zz_cholesky()
    l_hh = gp.h_cholesky()
    return GroupContext(
        index=index,
        gp=gp,
        zz_chol=zz_chol,
        l_hh=l_hh,
        prec_hh=winged_from_cholesky(l_hh),
        logdet_hh=star_logdet(l_hh),
        logdet_zz=2.0 * torch.log(torch.diagonal(zz_chol)).sum(),
        kzz_inv=torch.cholesky_inverse(zz_chol),
    )


def build_contexts(model: GgpModel):
    return [build_context(g, i) for i, g in enumerate(model.groups)]


def entropy_bound(post: MixturePosterior) -> Tensor:
    """Entropy term of the ELBO.

    K = 1: the exact Gaussian entropy 1/2 (D ln 2 pi e + log|S|) summed over
    groups.  K > 1: the pairwise lower bound
    -sum_k pi_k log sum_l pi_l N(m_k; m_l, S_k + S_l), which reduces to the
    exact entropy at K = 1.
    """
    if post.n_components == 1:
        total = torch.zeros((), dtype=DTYPE)
        for cell in post.components[0]:
            total = total + 0.5 * (cell.dim * LOG_2PI_E + cell.cov.logdet())
        return total
    means, variances = [], []
    for row in post.components:
        for cell in row:
            if not isinstance(cell.cov, DiagonalCov):
                raise UnsupportedCombination("K > 1 requires diagonal covariances")
        means.append(torch.cat([cell.mean for cell in row]))
        variances.append(torch.cat([cell.cov.values() for cell in row]))
    m = torch.stack(means)        # (K, D)
    v = torch.stack(variances)    # (K, D)
    vsum = v[:, None, :] + v[None, :, :]
    diff2 = (m[:, None, :] - m[None, :, :]).square()
    log_n = -0.5 * (torch.log(2.0 * math.pi * vsum) + diff2 / vsum).sum(-1)  # (K, K)
    logw = torch.log_softmax(post.log_weights, dim=0)
    inner = torch.logsumexp(logw[None, :] + log_n, dim=1)
    return -(post.weights() * inner).sum()


def _cell_quad_and_trace(cell: GroupPosterior, ctx: GroupContext):
    """m' K^-1 m and tr(K^-1 S) for one cell against its group prior."""
    u = cell.mean_matrix()                                   # (Q_r, M)
    w = torch.cholesky_solve(u.T, ctx.zz_chol)               # K_zz^-1 U' -> (M, Q_r)
    quad = (u.T * winged_matvec(ctx.prec_hh, w)).sum()
    if isinstance(cell.cov, DiagonalCov):
        s = cell.cov.values().reshape(cell.q_r, cell.m)
        trace = (winged_diag(ctx.prec_hh) * (s @ ctx.kzz_inv_diag)).sum()
    else:
        l_b, l_w = cell.cov.factors()
        tr_b = winged_star_trace(ctx.prec_hh, l_b)
        c = l_w.pivot_column
        od = l_w.off_diag
        tr_w = c @ ctx.kzz_inv @ c + (od.square() * ctx.kzz_inv_diag[1:]).sum()
        trace = tr_b * tr_w
    return quad, trace


def cross_entropy(post: MixturePosterior, contexts, return_per_group: bool = False):
    """-E_q log p(u) against the grouped prior; all reductions sparse."""
    weights = post.weights()
    per_group = []
    for ctx in contexts:
        q_r, m = ctx.gp.q_r, ctx.gp.m
        const = m * q_r * LOG_2PI + kron_logdet(ctx.logdet_hh, q_r, ctx.logdet_zz, m)
        mix = torch.zeros((), dtype=DTYPE)
        for k in range(post.n_components):
            quad, trace = _cell_quad_and_trace(post.cell(k, ctx.index), ctx)
            mix = mix + weights[k] * (quad + trace)
        per_group.append(-0.5 * (const + mix))
    total = torch.stack(per_group).sum()
    if return_per_group:
        return total, torch.stack(per_group)
    return total


@dataclass
class GroupMarginal:
    """Marginal posterior of one group's latent values at a batch of inputs.

    Covariance at point n is k_tilde[n] * K_hh + quad_n, where quad_n is
    w_scalar[n] * S_b for Kronecker cells (both kept as star factors) or
    diag(w_diag[n]) for diagonal cells.
    """

    mean: Tensor                 # (n, Q_r)
    k_tilde: Tensor              # (n,)
    l_hh: SparseStarCholesky
    w_scalar: Tensor = None      # (n,) when Kronecker
    l_sb: SparseStarCholesky = None
    w_diag: Tensor = None        # (n, Q_r) when diagonal

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    @property
    def q_r(self) -> int:
        return self.mean.shape[1]


def marginal_posterior_batch(post: MixturePosterior, ctx: GroupContext,
                             a: Tensor, k_tilde: Tensor, component: int = 0) -> GroupMarginal:
    """Marginal q_k of one group's functions at points with prior weights a.

    a is (n, M) from conditional_prior_batch; everything stays O(Q_r + M)
    per point.
    """
    cell = post.cell(component, ctx.index)
    u = cell.mean_matrix()
    mean = a @ u.T                                           # (n, Q_r)
    if isinstance(cell.cov, DiagonalCov):
        s = cell.cov.values().reshape(cell.q_r, cell.m)      # (Q_r, M)
        w_diag = a.square() @ s.T                            # (n, Q_r)
        return GroupMarginal(mean=mean, k_tilde=k_tilde, l_hh=ctx.l_hh, w_diag=w_diag)
    l_b, l_w = cell.cov.factors()
    c = l_w.pivot_column
    od = l_w.off_diag
    w_scalar = (a @ c).square() + a[:, 1:].square() @ od.square()   # a' S_w a
    return GroupMarginal(mean=mean, k_tilde=k_tilde, l_hh=ctx.l_hh,
                         w_scalar=w_scalar, l_sb=l_b)


def marginal_posterior_at(post: MixturePosterior, ctx: GroupContext, x,
                          component: int = 0) -> GroupMarginal:
    a, kt = conditional_prior_batch(ctx.gp, torch.as_tensor(x, dtype=DTYPE).reshape(1, -1),
                                    ctx.zz_chol)
    return marginal_posterior_batch(post, ctx, a, kt, component)


def indirect_sample_batch(marg: GroupMarginal, gen: torch.Generator, n_samples: int,
                          tol: float = 1e-10) -> Tensor:
    """Draws from N(mean_n, k_tilde_n K_hh + quad_n), shape (n, S, Q_r).

    Two independent draws are summed: one through the prior factor scaled
    by sqrt(k_tilde), one through the posterior quad factor around the
    mean.  Costs O(S Q_r) per point; no Q_r x Q_r matrix appears.
    """
    if marg.k_tilde.min().item() < -tol:
        raise NegativeScalar(f"negative conditional prior variance {marg.k_tilde.min().item()}")
    n, q_r = marg.mean.shape
    kt = marg.k_tilde.clamp(min=0.0)
    z1 = torch.randn(n, n_samples, q_r, dtype=DTYPE, generator=gen)
    eps1 = torch.sqrt(kt + SAMPLE_VAR_FLOOR)[:, None, None] * star_matmul_vec(marg.l_hh, z1)
    z2 = torch.randn(n, n_samples, q_r, dtype=DTYPE, generator=gen)
    if marg.w_diag is not None:
        if marg.w_diag.min().item() < -tol:
            raise NegativeScalar(f"negative posterior variance {marg.w_diag.min().item()}")
        eps2 = torch.sqrt(marg.w_diag.clamp(min=0.0) + SAMPLE_VAR_FLOOR)[:, None, :] * z2
    else:
        if marg.w_scalar.min().item() < -tol:
            raise NegativeScalar(f"negative posterior variance {marg.w_scalar.min().item()}")
        w = marg.w_scalar.clamp(min=0.0)
        eps2 = torch.sqrt(w + SAMPLE_VAR_FLOOR)[:, None, None] * star_matmul_vec(marg.l_sb, z2)
    return marg.mean[:, None, :] + eps1 + eps2


def indirect_sample(marg: GroupMarginal, gen: torch.Generator, n_samples: int) -> Tensor:
    """Single-point convenience: (S, Q_r) draws for a one-row marginal."""
    if marg.n_points != 1:
        raise DimensionMismatch(f"expected a single-point marginal, got {marg.n_points} points")
    return indirect_sample_batch(marg, gen, n_samples)[0]


def assemble_outputs(model: GgpModel, f: Tensor) -> Tensor:
    """y = W g per (point, sample) from the flat latent vector."""
    wmat = model.structure.weight_matrix_indices()
    nidx = model.structure.node_indices()
    w = f[..., wmat]                                         # (..., P, Q_g)
    g = f[..., nidx]                                         # (..., Q_g)
    return torch.einsum("...pq,...q->...p", w, g)


def sample_latents(model: GgpModel, post: MixturePosterior, contexts, X: Tensor,
                   n_samples: int, seed_keys) -> Tensor:
    """(b, S, Q_total) joint latent draws at the batch inputs.

    For mixtures the component is drawn per MC sample (shared across the
    batch); those index draws carry no gradient, so mixture weights learn
    only through the entropy and cross-entropy terms.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    b = X.shape[0]
    k_comp = None
    if post.n_components > 1:
        gen_c = make_generator(*seed_keys, len(contexts))
        k_comp = torch.multinomial(post.weights().detach(), n_samples,
                                   replacement=True, generator=gen_c)
    f = torch.zeros(b, n_samples, model.n_latent, dtype=DTYPE)
    for ctx in contexts:
        a, kt = conditional_prior_batch(ctx.gp, X, ctx.zz_chol)
        gen = make_generator(*seed_keys, ctx.index)
        if k_comp is None:
            samples = indirect_sample_batch(
                marginal_posterior_batch(post, ctx, a, kt, 0), gen, n_samples)
        else:
            samples = torch.zeros(b, n_samples, ctx.gp.q_r, dtype=DTYPE)
            for k in torch.unique(k_comp).tolist():
                idx = (k_comp == k).nonzero(as_tuple=True)[0]
                marg = marginal_posterior_batch(post, ctx, a, kt, k)
                samples[:, idx, :] = indirect_sample_batch(marg, gen, idx.numel())
        f[..., torch.tensor(ctx.gp.members)] = samples
    return f


def ell_minibatch(model: GgpModel, post: MixturePosterior, contexts, X: Tensor,
                  Y: Tensor, n_total: int, n_samples: int, seed_keys) -> Tensor:
    """Minibatch Monte Carlo estimate of the expected log-likelihood.

    (N/|B|) sum_n (1/S) sum_s log N(y_n; W_n^s g_n^s, Sigma_y), with the
    latent draws assembled from per-group indirect samples.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"batch X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    b = X.shape[0]
    f = sample_latents(model, post, contexts, X, n_samples, seed_keys)
    y_hat = assemble_outputs(model, f)                       # (b, S, P)
    noise = model.noise_variances()
    log_p = -0.5 * ((LOG_2PI + torch.log(noise)).sum()
                    + ((Y[:, None, :] - y_hat).square() / noise).sum(-1))  # (b, S)
    return (n_total / b) * log_p.mean(dim=1).sum()


@dataclass
class ElboBreakdown:
    """The three ELBO terms; total is their sum."""

    entropy: Tensor
    cross_entropy: Tensor
    ell: Tensor
    total: Tensor
    per_group_cross: Tensor


def elbo(model: GgpModel, post: MixturePosterior, X: Tensor, Y: Tensor,
         n_total: int, n_samples: int, seed_keys, contexts=None) -> ElboBreakdown:
    """Stochastic ELBO on one minibatch; exact in everything but the ELL."""
    if contexts is None:
        contexts = build_contexts(model)
    ent = entropy_bound(post)
    ce, per_group = cross_entropy(post, contexts, return_per_group=True)
    ell = ell_minibatch(model, post, contexts, X, Y, n_total, n_samples, seed_keys)
    return ElboBreakdown(entropy=ent, cross_entropy=ce, ell=ell,
                         total=ent + ce + ell, per_group_cross=per_group)
