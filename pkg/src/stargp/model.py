"""Grouped GP prior over latent weight and node functions.

Latent functions are partitioned into non-overlapping groups.  Within a
group the functions covary through a star-structured covariance over
cross-function features h (conditional independence given the group's pivot
function), while over inputs x they share one kernel with M inducing
inputs Z.  The full group covariance is the Kronecker product
K_hh (x) K_zz, which is never materialized: K_hh lives as a sparse star
factor, K_zz as a dense M x M Cholesky.

The network layout used for multi-site forecasting ("solar" layout) follows
the regression-network construction y_n = W_n g_n: with P tasks and Q_g
node functions, each row i of W forms a group pivoted on the diagonal
weight W_ii, and each node is a singleton group.
"""

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    ConfigError,
    DimensionMismatch,
    PivotNotMember,
    SingularInducingGram,
)
from .kernels import (
    DeltaCorrection,
    Epanechnikov,
    FeatureMatrix,
    Kernel,
    Product,
    RBF,
    RickerWavelet,
    split_delta,
)
from .star import DTYPE, SparseStarCholesky, StarCovariance, build_star_cholesky

SPARSITY_MODES = ("implicit", "explicit", "free")
ZZ_JITTER = 1e-6


class GprnStructure:
    """Index bookkeeping for the regression-network likelihood y = W g.

    Latent functions are laid out flat: P*Q_g weight functions first
    (row-major over tasks), then Q_g node functions.
    """

    def __init__(self, tasks: int, nodes: int):
        if tasks < 1 or nodes < 1:
            raise ConfigError(f"need at least one task and one node, got {tasks}, {nodes}")
        self.tasks = tasks
        self.nodes = nodes

    @property
    def n_latent(self) -> int:
        return self.nodes * (self.tasks + 1)

    def weight_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.tasks and 0 <= j < self.nodes):
            raise DimensionMismatch(f"weight ({i},{j}) outside {self.tasks}x{self.nodes}")
        return i * self.nodes + j

    def node_index(self, j: int) -> int:
        if not 0 <= j < self.nodes:
            raise DimensionMismatch(f"node {j} outside {self.nodes}")
        return self.tasks * self.nodes + j

    def weight_matrix_indices(self) -> Tensor:
        return torch.arange(self.tasks * self.nodes).reshape(self.tasks, self.nodes)

    def node_indices(self) -> Tensor:
        return torch.arange(self.tasks * self.nodes, self.n_latent)


class FreeCholParams(nn.Module):
    """Directly parameterized sparse star factor.

    Stores 2Q-1 reals: the pivot column (head in log space so the decoded
    L[0,0] stays positive, cross terms unconstrained) and the log off-pivot
    diagonal.  Decodes to pivot_column = (1, 0.1, ..., 0.1), off_diag = 1
    at initialization; the small nonzero cross terms break symmetry.
    """

    def __init__(self, dim: int, init_cross: float = 0.1, init_scale: float = 1.0):
        super().__init__()
        if dim < 1:
            raise ConfigError(f"factor dimension must be >= 1, got {dim}")
        if init_scale <= 0:
            raise ConfigError(f"init_scale must be positive, got {init_scale}")
        self.dim = dim
        log_scale = float(np.log(init_scale))
        self.pivot_column = nn.Parameter(torch.cat([
            torch.full((1,), log_scale, dtype=DTYPE),
            torch.full((dim - 1,), init_cross, dtype=DTYPE),
        ]))
        self.off_diag = nn.Parameter(torch.full((dim - 1,), log_scale, dtype=DTYPE))

    def decode(self) -> SparseStarCholesky:
        head = torch.exp(self.pivot_column[:1])
        return SparseStarCholesky(
            pivot_column=torch.cat([head, self.pivot_column[1:]]),
            off_diag=torch.exp(self.off_diag),
        )


def reorder_for_pivot(members, pivot):
    """Members with the pivot moved to the front, order otherwise stable."""
    members = list(members)
    if pivot not in members:
        raise PivotNotMember(f"pivot {pivot} not in group members {members}")
    return [pivot] + [m for m in members if m != pivot]


class GroupPrior(nn.Module):
    """One latent-function group: members (pivot first), the star-structured
    covariance over cross-function features, one input kernel, and M
    learnable inducing inputs."""

    def __init__(self, group_id, members, sparsity_mode, x_kernel, inducing_inputs,
                 h_kernel=None, h_features=None, zz_jitter=ZZ_JITTER, hh_jitter=0.0):
        super().__init__()
        members = [int(m) for m in members]
        if len(set(members)) != len(members) or not members:
            raise ConfigError(f"group {group_id} members must be nonempty and unique: {members}")
        if sparsity_mode not in SPARSITY_MODES:
            raise ConfigError(f"sparsity_mode must be one of {SPARSITY_MODES}, got {sparsity_mode!r}")
        self.group_id = int(group_id)
        self.members = members
        self.sparsity_mode = sparsity_mode
        self.x_kernel = x_kernel
        self.zz_jitter = float(zz_jitter)
        self.hh_jitter = float(hh_jitter)

        q = len(members)
        if sparsity_mode == "free":
            if not isinstance(h_kernel, FreeCholParams) or h_kernel.dim != q:
                raise ConfigError(
                    f"free mode needs FreeCholParams of dim {q}, got {type(h_kernel).__name__}")
        elif h_kernel is None:
            if q != 1:
                raise ConfigError(f"group {group_id} has {q} members but no cross-function kernel")
        else:
            if not isinstance(h_kernel, Kernel):
                raise ConfigError(f"h_kernel must be a kernel, got {type(h_kernel).__name__}")
            if h_features is None or h_features.rows != q:
                raise ConfigError(
                    f"group {group_id} needs cross-function features with {q} rows")
            if sparsity_mode == "implicit":
                core, _ = split_delta(h_kernel)
                if core is None or not core.separable:
                    raise ConfigError(
                        "implicit mode requires a multiplicatively separable core kernel; "
                        "use explicit mode to impose the structure instead")
        self.h_kernel = h_kernel
        self.h_features = h_features
        z = torch.as_tensor(inducing_inputs, dtype=DTYPE)
        if z.dim() == 1:
            z = z.reshape(-1, 1)
        self.inducing_inputs = nn.Parameter(z)

    @property
    def q_r(self) -> int:
        return len(self.members)

    @property
    def m(self) -> int:
        return self.inducing_inputs.shape[0]

    @property
    def pivot(self) -> int:
        return self.members[0]

    def h_cholesky(self) -> SparseStarCholesky:
        return group_h_cholesky(self)

    def zz_cholesky(self) -> Tensor:
        """Dense lower Cholesky of K_zz + jitter I."""
        z = self.inducing_inputs
        kzz = self.x_kernel.pair(z, z)
        kzz = kzz + self.zz_jitter * torch.eye(self.m, dtype=DTYPE)
        try:
            return torch.linalg.cholesky(kzz)
        except torch.linalg.LinAlgError as e:
            raise SingularInducingGram(
                f"group {self.group_id}: inducing gram not positive definite "
                f"even with jitter {self.zz_jitter}") from e


def group_h_cholesky(gp: GroupPrior) -> SparseStarCholesky:
    """Sparse factor of the group's cross-function covariance, O(Q_r).

    free: decode the stored parameters.  implicit/explicit: evaluate only
    the pivot row and the diagonal of the kernel (the off-pivot cross terms
    are implied by conditional independence; for a separable kernel the
    implication is exact, otherwise it is imposed).
    """
    if gp.sparsity_mode == "free":
        return gp.h_kernel.decode()
    if gp.h_kernel is None:
        # singleton group: cross-function covariance is the scalar 1
        return SparseStarCholesky(pivot_column=torch.ones(1, dtype=DTYPE),
                                  off_diag=torch.zeros(0, dtype=DTYPE))
    vals = gp.h_features.values
    diag = gp.h_kernel.diag_self(vals, pivot_index=0)
    core, _ = split_delta(gp.h_kernel)
    if core is None:
        cross = torch.zeros(gp.q_r - 1, dtype=DTYPE)
    else:
        cross = core.pair(vals[1:], vals[:1]).reshape(-1)
    cov = StarCovariance(pivot_var=diag[0], cross=cross, diag=diag[1:])
    return build_star_cholesky(cov, jitter=gp.hh_jitter)


def conditional_prior_batch(gp: GroupPrior, X: Tensor, zz_chol: Tensor = None):
    """Per-point conditional prior quantities against the inducing set.

    Returns (A, k_tilde): A[n] = K_zz^-1 k(Z, x_n) with shape (n, M), and
    k_tilde[n] = k(x_n, x_n) - k(x_n, Z) A[n] clamped at 0.  The full
    per-point prior covariance over the group is k_tilde[n] * K_hh.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.dim() == 1:
        X = X.reshape(1, -1)
    if zz_chol is None:
        zz_chol = gp.zz_cholesky()
    kxz = gp.x_kernel.pair(X, gp.inducing_inputs)          # (n, M)
    a = torch.cholesky_solve(kxz.T, zz_chol).T             # (n, M)
    k_diag = gp.x_kernel.diag_self(X)
    k_tilde = (k_diag - (kxz * a).sum(-1)).clamp(min=0.0)
    return a, k_tilde


def conditional_prior_at(gp: GroupPrior, x, zz_chol: Tensor = None):
    """Single-point form of conditional_prior_batch."""
    a, k_tilde = conditional_prior_batch(gp, torch.as_tensor(x, dtype=DTYPE).reshape(1, -1),
                                         zz_chol)
    return a[0], k_tilde[0]


class GgpModel(nn.Module):
    """Groups plus the regression-network structure and per-task noise."""

    def __init__(self, structure: GprnStructure, groups, noise_variance=0.25):
        super().__init__()
        self.structure = structure
        self.groups = nn.ModuleList(groups)
        covered = [m for g in self.groups for m in g.members]
        if sorted(covered) != list(range(structure.n_latent)):
            raise ConfigError(
                f"groups must partition the {structure.n_latent} latent functions; got {sorted(covered)}")
        nv = torch.as_tensor(noise_variance, dtype=DTYPE)
        if nv.dim() == 0:
            nv = nv.expand(structure.tasks).clone()
        if (nv <= 0).any():
            raise ConfigError("noise variances must be strictly positive")
        self.log_noise = nn.Parameter(torch.log(nv))
        # where each latent function lives: group index and position within it
        self.latent_group = [0] * structure.n_latent
        self.latent_pos = [0] * structure.n_latent
        for gi, g in enumerate(self.groups):
            for pos, member in enumerate(g.members):
                self.latent_group[member] = gi
                self.latent_pos[member] = pos

    @property
    def n_latent(self) -> int:
        return self.structure.n_latent

    def noise_variances(self) -> Tensor:
        return torch.exp(self.log_noise)


def kmeans_init(X: np.ndarray, m: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """Lloyd's algorithm from a random subsample; deterministic given rng.

    Used only to place initial inducing inputs, so a handful of iterations
    is enough.  If fewer distinct rows than m exist, pads with jittered
    repeats.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    if n >= m:
        centers = X[rng.choice(n, size=m, replace=False)].copy()
    else:
        pick = rng.choice(n, size=m, replace=True)
        centers = X[pick] + 1e-3 * rng.standard_normal((m, X.shape[1]))
    for _ in range(iters):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(1)
        for k in range(m):
            mask = assign == k
            if mask.any():
                centers[k] = X[mask].mean(0)
    # exact duplicates make the inducing gram singular; spread them
    for k in range(1, m):
        while any(np.allclose(centers[k], centers[j]) for j in range(k)):
            centers[k] = centers[k] + 1e-3 * rng.standard_normal(X.shape[1])
    return centers


def build_solar_model(site_coords, X_train, m_inducing, sparsity_mode, seed=0,
                      nodes=None, noise_variance=0.25, delta_variance=0.01,
                      ricker_dilation=None, h_lengthscale=1.0, h_bandwidth=None,
                      x_lengthscale=1.0, x_variance=1.0, zz_jitter=ZZ_JITTER,
                      free_init_cross=0.1):
    """Assemble the multi-site forecasting model.

    One weight-row group per task (pivot on the diagonal weight, star
    covariance over site coordinates) and one singleton group per node.
    Inducing inputs start at k-means centers of the training inputs, one
    independent subsample per group.
    """
    site_coords = torch.as_tensor(site_coords, dtype=DTYPE)
    if site_coords.dim() == 1:
        site_coords = site_coords.reshape(-1, 1)
    p = site_coords.shape[0]
    q_g = p if nodes is None else int(nodes)
    if q_g != p:
        raise ConfigError(
            f"the row-group layout pivots on diagonal weights, which needs nodes == tasks; "
            f"got {q_g} nodes for {p} tasks")
    structure = GprnStructure(tasks=p, nodes=q_g)
    X_train = np.asarray(X_train, dtype=float)
    d_in = 1 if X_train.ndim == 1 else X_train.shape[1]
    if np.ndim(x_lengthscale) == 0:
        x_ls = [float(x_lengthscale)] * d_in
    else:
        x_ls = [float(v) for v in x_lengthscale]
        if len(x_ls) != d_in:
            raise ConfigError(
                f"x_lengthscale has {len(x_ls)} entries for {d_in} input columns")
    rng = np.random.default_rng(seed)

    if h_bandwidth is None:
        # compact support must reach every site pair
        dist = torch.cdist(site_coords, site_coords)
        h_bandwidth = max(2.0 * dist.max().item(), 1.0)
    if ricker_dilation is None:
        # keep scaled coordinates inside the wavelet's positive lobe
        # (the mother wavelet crosses zero at |t| = 1)
        ricker_dilation = max(2.5 * site_coords.abs().max().item(), 1.0)

    shared_wavelet = RickerWavelet(dilation=[ricker_dilation] * site_coords.shape[1])

    def h_kernel_for(mode, q):
        if mode == "free":
            return FreeCholParams(q, init_cross=free_init_cross)
        if mode == "implicit":
            return Product([shared_wavelet, DeltaCorrection(variance=delta_variance)])
        return Product([RBF(lengthscales=h_lengthscale, variance=1.0),
                        Epanechnikov(bandwidth=h_bandwidth),
                        DeltaCorrection(variance=delta_variance)])

    groups = []
    for i in range(p):
        members = reorder_for_pivot([structure.weight_index(i, j) for j in range(q_g)],
                                    structure.weight_index(i, i))
        order = [i] + [j for j in range(q_g) if j != i]
        groups.append(GroupPrior(
            group_id=i,
            members=members,
            sparsity_mode=sparsity_mode,
            x_kernel=RBF(lengthscales=list(x_ls), variance=x_variance),
            inducing_inputs=kmeans_init(X_train, m_inducing, rng),
            h_kernel=h_kernel_for(sparsity_mode, q_g),
            h_features=None if sparsity_mode == "free" else FeatureMatrix(values=site_coords[order]),
            zz_jitter=zz_jitter,
        ))
    for j in range(q_g):
        # node functions live in singleton groups with cross-function
        # covariance fixed at 1; only the input kernel is learned
        groups.append(GroupPrior(
            group_id=p + j,
            members=[structure.node_index(j)],
            sparsity_mode="explicit",
            x_kernel=RBF(lengthscales=list(x_ls), variance=x_variance),
            inducing_inputs=kmeans_init(X_train, m_inducing, rng),
            h_kernel=None,
            zz_jitter=zz_jitter,
        ))
    return GgpModel(structure, groups, noise_variance=noise_variance)
