"""Kernel functions over time/lag inputs and over cross-function features.

Two families matter here.  Ordinary kernels (RBF, periodic, Epanechnikov)
measure similarity through differences and are what most GP code uses.
Multiplicatively separable kernels, kappa(a, b) = phi(a) * psi(b), are
special: their gram matrices satisfy

    kappa(h_i, h_j) = kappa(h_i, h_k) kappa(h_k, h_k)^-1 kappa(h_k, h_j)

for any anchor row k, which is exactly the conditional-independence identity
behind the star-structured factors in `star`.  The Ricker wavelet and
constant kernels are separable; ``verify_implicit_sparsity`` checks the
identity numerically for any kernel.

A separable gram is rank one, so it is paired with an index-keyed diagonal
correction (``DeltaCorrection``) that adds variance on the diagonal, skipping
the pivot row.  The correction compares row indices, not feature values, so
it only exists at gram level; pointwise evaluation of a spec containing it
raises.

All positive hyperparameters are stored as logs in ``nn.Parameter`` leaves so
any optimizer step keeps them positive.
"""

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import (
    ConfigError,
    DimensionMismatch,
    MissingPivot,
    PivotNotInvertible,
    PointwiseDeltaUnsupported,
)

DTYPE = torch.float64


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows of input features (one row per latent function or data point)."""

    values: Tensor

    def __post_init__(self):
        v = torch.as_tensor(self.values, dtype=DTYPE)
        if v.dim() == 1:
            v = v.reshape(-1, 1)
        if v.dim() != 2 or v.shape[0] < 1:
            raise DimensionMismatch(f"expected a nonempty 2-d matrix, got shape {tuple(v.shape)}")
        if not torch.isfinite(v).all():
            raise ConfigError("feature matrix contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


def _positive(value, name, vector=False) -> Tensor:
    t = torch.as_tensor(value, dtype=DTYPE)
    if t.dim() == 0 and vector:
        t = t.reshape(1)
    if (t <= 0).any():
        raise ConfigError(f"{name} must be strictly positive, got {value}")
    return t


class Kernel(nn.Module):
    """Base class. Subclasses implement pairwise evaluation on raw value
    matrices; gram assembly, active-dim selection and the delta correction
    are handled here."""

    separable = False

    def __init__(self, active_dims=None):
        super().__init__()
        self.active_dims = None if active_dims is None else list(active_dims)

    def _select(self, vals: Tensor) -> Tensor:
        if self.active_dims is None:
            return vals
        if max(self.active_dims) >= vals.shape[1]:
            raise DimensionMismatch(
                f"active_dims {self.active_dims} out of range for {vals.shape[1]} input dims")
        return vals[:, self.active_dims]

    def _pair(self, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def pair(self, a_vals: Tensor, b_vals: Tensor) -> Tensor:
        """Cross-covariance matrix between two raw (n, d) value matrices."""
        return self._pair(self._select(torch.as_tensor(a_vals, dtype=DTYPE)),
                          self._select(torch.as_tensor(b_vals, dtype=DTYPE)))

    def diag_self(self, a_vals: Tensor, pivot_index=None) -> Tensor:
        """Diagonal of the self-gram, including any delta correction."""
        a = self._select(torch.as_tensor(a_vals, dtype=DTYPE))
        return self._diag(a)

    def _diag(self, a: Tensor) -> Tensor:
        # generic fallback; cheap kernels override
        return torch.stack([self._pair(a[i:i + 1], a[i:i + 1]).reshape(()) for i in range(a.shape[0])])

    def eval(self, a, b) -> Tensor:
        """Pointwise kernel value on two single feature vectors."""
        a = torch.as_tensor(a, dtype=DTYPE).reshape(1, -1)
        b = torch.as_tensor(b, dtype=DTYPE).reshape(1, -1)
        if a.shape[1] != b.shape[1]:
            raise DimensionMismatch(f"input dims differ: {a.shape[1]} vs {b.shape[1]}")
        return self.pair(a, b).reshape(())

    def gram(self, A: FeatureMatrix, B: FeatureMatrix = None, pivot_index=None) -> Tensor:
        """Full (cross-)gram matrix.  The delta correction applies only on
        the self-gram (B omitted or B is A), where row indices are shared."""
        if B is not None and B.dims != A.dims:
            raise DimensionMismatch(f"feature dims differ: {A.dims} vs {B.dims}")
        out = self.pair(A.values, (A if B is None else B).values)
        if B is None or B is A:
            out = self._apply_delta(out, pivot_index)
        return out

    def _apply_delta(self, gram: Tensor, pivot_index) -> Tensor:
        return gram

    def _delta_diag(self, n: int, pivot_index) -> Tensor:
        return torch.zeros(n, dtype=DTYPE)


class RBF(Kernel):
    """variance * exp(-1/2 * sum_d ((a_d - b_d) / ls_d)^2)"""

    def __init__(self, lengthscales=1.0, variance=1.0, active_dims=None):
        super().__init__(active_dims)
        self.log_lengthscales = nn.Parameter(torch.log(_positive(lengthscales, "lengthscales", vector=True)))
        self.log_variance = nn.Parameter(torch.log(_positive(variance, "variance")))

    def _pair(self, a, b):
        ls = torch.exp(self.log_lengthscales)
        if ls.shape[0] not in (1, a.shape[1]):
            raise DimensionMismatch(f"{ls.shape[0]} lengthscales for {a.shape[1]} input dims")
        d = (a[:, None, :] - b[None, :, :]) / ls
        return torch.exp(self.log_variance - 0.5 * d.square().sum(-1))

    def _diag(self, a):
        return torch.exp(self.log_variance).expand(a.shape[0]).clone()


class Periodic(Kernel):
    """variance * exp(-2 sin^2(pi (a - b) / period) / lengthscale^2),
    defined on a single input column (a time index)."""

    def __init__(self, period=1.0, lengthscale=1.0, variance=1.0, active_dims=None):
        super().__init__(active_dims)
        self.log_period = nn.Parameter(torch.log(_positive(period, "period")))
        self.log_lengthscale = nn.Parameter(torch.log(_positive(lengthscale, "lengthscale")))
        self.log_variance = nn.Parameter(torch.log(_positive(variance, "variance")))

    def _pair(self, a, b):
        if a.shape[1] != 1:
            raise DimensionMismatch(
                f"periodic kernel needs exactly one input column, got {a.shape[1]}; set active_dims")
        delta = a[:, None, 0] - b[None, :, 0]
        s = torch.sin(torch.pi * delta / torch.exp(self.log_period))
        return torch.exp(self.log_variance - 2.0 * s.square() / torch.exp(2.0 * self.log_lengthscale))

    def _diag(self, a):
        if a.shape[1] != 1:
            raise DimensionMismatch(
                f"periodic kernel needs exactly one input column, got {a.shape[1]}; set active_dims")
        return torch.exp(self.log_variance).expand(a.shape[0]).clone()


class Epanechnikov(Kernel):
    """max(0, 1 - (||a - b|| / bandwidth)^2); compact support, no variance."""

    def __init__(self, bandwidth=1.0, active_dims=None):
        super().__init__(active_dims)
        self.log_bandwidth = nn.Parameter(torch.log(_positive(bandwidth, "bandwidth")))

    def _pair(self, a, b):
        sq = (a[:, None, :] - b[None, :, :]).square().sum(-1)
        return (1.0 - sq / torch.exp(2.0 * self.log_bandwidth)).clamp(min=0.0)

    def _diag(self, a):
        return torch.ones(a.shape[0], dtype=DTYPE)


def ricker(t: Tensor) -> Tensor:
    """Mother wavelet (1 - t^2) exp(-t^2 / 2); ricker(0) = 1, ricker(1) = 0."""
    t2 = t.square()
    return (1.0 - t2) * torch.exp(-0.5 * t2)


class RickerWavelet(Kernel):
    """prod_d ricker(a_d / c_d) * ricker(b_d / c_d): a dot-product wavelet
    kernel, multiplicatively separable by construction."""

    separable = True

    def __init__(self, dilation=1.0, active_dims=None):
        super().__init__(active_dims)
        self.log_dilation = nn.Parameter(torch.log(_positive(dilation, "dilation", vector=True)))

    def _feature(self, a):
        c = torch.exp(self.log_dilation)
        if c.shape[0] not in (1, a.shape[1]):
            raise DimensionMismatch(f"{c.shape[0]} dilations for {a.shape[1]} input dims")
        return ricker(a / c).prod(-1)

    def _pair(self, a, b):
        return torch.outer(self._feature(a), self._feature(b))

    def _diag(self, a):
        return self._feature(a).square()


class Constant(Kernel):
    """Constant positive covariance; trivially separable."""

    separable = True

    def __init__(self, value=1.0, active_dims=None):
        super().__init__(active_dims)
        self.log_value = nn.Parameter(torch.log(_positive(value, "value")))

    def _pair(self, a, b):
        return torch.exp(self.log_value).expand(a.shape[0], b.shape[0]).clone()

    def _diag(self, a):
        return torch.exp(self.log_value).expand(a.shape[0]).clone()


class DeltaCorrection(Kernel):
    """Index-keyed variance added on the self-gram diagonal, optionally
    skipping the pivot row.  Keyed on row position, never feature values:
    two rows with identical coordinates stay distinct.  Only meaningful
    inside gram/diag_self; pointwise evaluation raises."""

    def __init__(self, variance=1.0, exclude_pivot=True):
        super().__init__(None)
        self.log_variance = nn.Parameter(torch.log(_positive(variance, "variance")))
        self.exclude_pivot = bool(exclude_pivot)

    def _pair(self, a, b):
        raise PointwiseDeltaUnsupported(
            "the delta correction is keyed on row indices; evaluate through gram()")

    def eval(self, a, b):
        raise PointwiseDeltaUnsupported(
            "the delta correction is keyed on row indices; evaluate through gram()")

    def _delta_diag(self, n, pivot_index):
        d = torch.exp(self.log_variance).expand(n).clone()
        if self.exclude_pivot:
            if pivot_index is None:
                raise MissingPivot("delta correction excludes the pivot; pass pivot_index")
            if not 0 <= pivot_index < n:
                raise DimensionMismatch(f"pivot_index {pivot_index} out of range for {n} rows")
            d[pivot_index] = 0.0
        return d

    def gram(self, A, B=None, pivot_index=None):
        if B is not None and B is not A:
            raise PointwiseDeltaUnsupported(
                "the delta correction is defined only on the self-gram")
        n = A.rows
        return torch.diag(self._delta_diag(n, pivot_index))

    def diag_self(self, a_vals, pivot_index=None):
        n = torch.as_tensor(a_vals, dtype=DTYPE).shape[0]
        return self._delta_diag(n, pivot_index)


class Product(Kernel):
    """Product of kernels, with one twist: delta-correction factors act
    additively on the self-gram diagonal (the corrected covariance is
    core(a, b) + sigma^2 delta_ij), because the correction repairs the rank
    of the core's gram rather than scaling it."""

    def __init__(self, factors):
        super().__init__(None)
        factors = list(factors)
        if not factors:
            raise ConfigError("product kernel needs at least one factor")
        self.factors = nn.ModuleList(factors)

    @property
    def core_factors(self):
        return [f for f in self.factors if not isinstance(f, DeltaCorrection)]

    @property
    def delta_factors(self):
        return [f for f in self.factors if isinstance(f, DeltaCorrection)]

    @property
    def separable(self):
        return all(f.separable for f in self.factors)

    def _pair(self, a, b):
        if self.delta_factors:
            raise PointwiseDeltaUnsupported(
                "the delta correction is keyed on row indices; evaluate through gram()")
        return self._core_pair(a, b)

    def _core_pair(self, a, b):
        core = self.core_factors
        if not core:
            return torch.zeros(a.shape[0], b.shape[0], dtype=DTYPE)
        out = core[0]._pair(core[0]._select(a), core[0]._select(b))
        for f in core[1:]:
            out = out * f._pair(f._select(a), f._select(b))
        return out

    def gram(self, A, B=None, pivot_index=None):
        if B is not None and B.dims != A.dims:
            raise DimensionMismatch(f"feature dims differ: {A.dims} vs {B.dims}")
        out = self._core_pair(A.values, (A if B is None else B).values)
        if B is None or B is A:
            out = self._apply_delta(out, pivot_index)
        return out

    def _apply_delta(self, gram, pivot_index):
        for f in self.delta_factors:
            gram = gram + torch.diag(f._delta_diag(gram.shape[0], pivot_index))
        return gram

    def diag_self(self, a_vals, pivot_index=None):
        a = torch.as_tensor(a_vals, dtype=DTYPE)
        if a.dim() == 1:
            a = a.reshape(-1, 1)
        core = self.core_factors
        if core:
            out = core[0]._diag(core[0]._select(a))
            for f in core[1:]:
                out = out * f._diag(f._select(a))
        else:
            out = torch.zeros(a.shape[0], dtype=DTYPE)
        for f in self.delta_factors:
            out = out + f._delta_diag(a.shape[0], pivot_index)
        return out


def split_delta(kernel: Kernel):
    """(core kernel without delta factors, list of delta factors).

    The core is what separability claims and rank-degeneracy arguments are
    about; returns (None, deltas) for a bare correction.
    """
    if isinstance(kernel, DeltaCorrection):
        return None, [kernel]
    if isinstance(kernel, Product):
        core = kernel.core_factors
        if not kernel.delta_factors:
            return kernel, []
        if len(core) == 1:
            return core[0], kernel.delta_factors
        return (Product(core) if core else None), kernel.delta_factors
    return kernel, []


@dataclass(frozen=True)
class SparsityReport:
    """Result of checking the separability identity
    k(i,j) = k(i,p) k(p,p)^-1 k(p,j) over all pairs against an anchor."""

    pivot: int
    tol: float
    max_violation: float
    passed: bool
    pairs_checked: int


def verify_implicit_sparsity(kernel: Kernel, H: FeatureMatrix, pivot: int = 0,
                             tol: float = 1e-10) -> SparsityReport:
    """Measure how far a kernel's gram is from the rank-one form implied by
    multiplicative separability.

    Separable kernels pass at tight tolerances on any feature set; ordinary
    kernels (RBF and friends) fail, which is the point of running this
    before trusting the implicit sparse construction.
    """
    core, _ = split_delta(kernel)
    if core is None:
        raise PointwiseDeltaUnsupported("cannot verify a bare delta correction")
    if not 0 <= pivot < H.rows:
        raise DimensionMismatch(f"pivot {pivot} out of range for {H.rows} rows")
    gram = core.gram(H)
    kpp = gram[pivot, pivot]
    if kpp.item() == 0.0 or not torch.isfinite(kpp):
        raise PivotNotInvertible(
            f"self-covariance at pivot row {pivot} is {kpp.item()}; pick another pivot")
    implied = torch.outer(gram[:, pivot], gram[pivot, :]) / kpp
    violation = (gram - implied).abs().max().item()
    return SparsityReport(pivot=pivot, tol=tol, max_violation=violation,
                          passed=violation <= tol, pairs_checked=H.rows * H.rows)


_BUILDERS = {
    "rbf": lambda c: RBF(lengthscales=c.get("lengthscales", c.get("lengthscale", 1.0)),
                         variance=c.get("variance", 1.0), active_dims=c.get("active_dims")),
    "periodic": lambda c: Periodic(period=c.get("period", 1.0),
                                   lengthscale=c.get("lengthscale", 1.0),
                                   variance=c.get("variance", 1.0),
                                   active_dims=c.get("active_dims")),
    "epanechnikov": lambda c: Epanechnikov(bandwidth=c.get("bandwidth", 1.0),
                                           active_dims=c.get("active_dims")),
    "ricker": lambda c: RickerWavelet(dilation=c.get("dilation", 1.0),
                                      active_dims=c.get("active_dims")),
    "constant": lambda c: Constant(value=c.get("value", 1.0),
                                   active_dims=c.get("active_dims")),
    "delta": lambda c: DeltaCorrection(variance=c.get("variance", 1.0),
                                       exclude_pivot=c.get("exclude_pivot", True)),
}


def build_kernel(cfg) -> Kernel:
    """Construct a kernel from its config-file form.

    A dict {"type": ..., params...} builds a leaf; {"type": "product",
    "factors": [...]} or a bare list builds a product.
    """
    if isinstance(cfg, (list, tuple)):
        return Product([build_kernel(c) for c in cfg])
    if not isinstance(cfg, dict) or "type" not in cfg:
        raise ConfigError(f"kernel config must be a dict with a 'type' key, got {cfg!r}")
    kind = str(cfg["type"]).lower()
    if kind == "product":
        if "factors" not in cfg:
            raise ConfigError("product kernel config needs a 'factors' list")
        return Product([build_kernel(c) for c in cfg["factors"]])
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown kernel type {cfg['type']!r}; known: "
                          f"{sorted(_BUILDERS) + ['product']}")
    return _BUILDERS[kind](cfg)
