"""Linear algebra for star-structured (pivot-conditioned) Gaussian covariances.

A covariance over Q jointly Gaussian variables that are conditionally
independent given the first ("pivot") variable has a Cholesky factor with a
single dense column plus a diagonal (2Q-1 numbers) and a precision matrix in
winged-diagonal form (3Q-2 numbers).  Everything here builds and manipulates
those representations directly with O(Q) univariate operations; no dense
Q x Q matrix is ever formed.

All operations are pure functions of immutable inputs and differentiable
through torch autograd.  The pivot is always stored at index 0; callers own
any permutation needed to put it there.
"""

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import (
    DegenerateCovariance,
    DegenerateFactor,
    DimensionMismatch,
    NegativeSchur,
    NonPositivePivot,
)

DTYPE = torch.float64

# Schur complements in (-SCHUR_TOL, 0] are clamped to zero (degenerate but
# representable); anything below -SCHUR_TOL is rejected.
SCHUR_TOL = 1e-10


def _vec(x, n=None) -> Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.dim() == 0:
        t = t.reshape(1)
    if t.dim() != 1:
        raise DimensionMismatch(f"expected 1-d vector, got shape {tuple(t.shape)}")
    if n is not None and t.shape[0] != n:
        raise DimensionMismatch(f"expected length {n}, got {t.shape[0]}")
    return t


@dataclass(frozen=True)
class SparseStarCholesky:
    """Lower-triangular factor with one dense column and a diagonal.

    pivot_column holds L[0,0], L[1,0], ..., L[Q-1,0]; off_diag holds
    L[1,1], ..., L[Q-1,Q-1].  Every other entry of the dense factor is zero.
    """

    pivot_column: Tensor
    off_diag: Tensor

    def __post_init__(self):
        pc = _vec(self.pivot_column)
        od = _vec(self.off_diag, pc.shape[0] - 1)
        object.__setattr__(self, "pivot_column", pc)
        object.__setattr__(self, "off_diag", od)
        if pc[0].item() <= 0:
            raise NonPositivePivot(f"L[0,0] = {pc[0].item()} must be > 0")
        if od.shape[0] and od.min().item() < 0:
            raise DegenerateFactor("off-pivot diagonal entries must be >= 0")

    @property
    def dim(self) -> int:
        return self.pivot_column.shape[0]


@dataclass(frozen=True)
class StarCovariance:
    """Covariance restricted to the star pattern: pivot variance, the
    pivot row/column, and the off-pivot diagonal.  Off-pivot cross terms
    are implied by conditional independence and never stored."""

    pivot_var: Tensor
    cross: Tensor
    diag: Tensor

    def __post_init__(self):
        pv = torch.as_tensor(self.pivot_var, dtype=DTYPE).reshape(())
        object.__setattr__(self, "pivot_var", pv)
        object.__setattr__(self, "cross", _vec(self.cross))
        object.__setattr__(self, "diag", _vec(self.diag, self.cross.shape[0]))

    @property
    def dim(self) -> int:
        return self.cross.shape[0] + 1


@dataclass(frozen=True)
class WingedPrecision:
    """Precision (inverse covariance) of a star-structured Gaussian:
    dense first row/column ("wings") plus a diagonal."""

    pivot_scalar: Tensor
    wing: Tensor
    diag: Tensor

    def __post_init__(self):
        ps = torch.as_tensor(self.pivot_scalar, dtype=DTYPE).reshape(())
        object.__setattr__(self, "pivot_scalar", ps)
        object.__setattr__(self, "wing", _vec(self.wing))
        object.__setattr__(self, "diag", _vec(self.diag, self.wing.shape[0]))
        if self.diag.shape[0] and self.diag.min().item() <= 0:
            raise DegenerateCovariance("precision diagonal must be > 0")

    @property
    def dim(self) -> int:
        return self.wing.shape[0] + 1


def build_star_cholesky(cov: StarCovariance, jitter: float = 0.0,
                        tol: float = SCHUR_TOL) -> SparseStarCholesky:
    """Construct the sparse Cholesky factor of a star covariance directly.

    L[0,0] = sqrt(k00), L[i,0] = k_i0 / L[0,0],
    L[i,i] = sqrt(k_ii + jitter - k_i0^2 / k00).

    Jitter is added to off-pivot diagonal entries only, never the pivot.
    Schur complements in (-tol, 0] clamp to zero; below -tol raises.
    """
    if cov.pivot_var.item() <= 0:
        raise NonPositivePivot(f"pivot variance {cov.pivot_var.item()} must be > 0")
    l00 = torch.sqrt(cov.pivot_var)
    col = cov.cross / l00
    schur = cov.diag + jitter - cov.cross.square() / cov.pivot_var
    if schur.shape[0]:
        worst = schur.min().item()
        if worst < -tol:
            raise NegativeSchur(
                f"Schur complement {worst} below -{tol}; covariance is not "
                "conditionally-independent star structured"
            )
        schur = schur.clamp(min=0.0)
    return SparseStarCholesky(
        pivot_column=torch.cat([l00.reshape(1), col]),
        off_diag=torch.sqrt(schur),
    )


def star_logdet(chol: SparseStarCholesky) -> Tensor:
    """log det(L L') = 2 (log L[0,0] + sum_i log L[i,i])."""
    if chol.off_diag.shape[0] and chol.off_diag.min().item() <= 0:
        raise DegenerateFactor("log-determinant undefined: zero diagonal entry")
    return 2.0 * (torch.log(chol.pivot_column[0]) + torch.log(chol.off_diag).sum())


def build_winged_precision(cov: StarCovariance) -> WingedPrecision:
    """Invert a star covariance analytically into winged-diagonal form.

    All Schur complements must be strictly positive (full-rank covariance).
    """
    if cov.pivot_var.item() <= 0:
        raise NonPositivePivot(f"pivot variance {cov.pivot_var.item()} must be > 0")
    schur = cov.diag - cov.cross.square() / cov.pivot_var
    if schur.shape[0] and schur.min().item() <= 0:
        raise DegenerateCovariance(
            f"Schur complement {schur.min().item()} <= 0; covariance is singular"
        )
    diag = 1.0 / schur
    wing = -cov.cross * diag / cov.pivot_var
    pivot = 1.0 / cov.pivot_var + (cov.cross.square() * diag).sum() / cov.pivot_var.square()
    return WingedPrecision(pivot_scalar=pivot, wing=wing, diag=diag)


def winged_from_cholesky(chol: SparseStarCholesky) -> WingedPrecision:
    """Precision of the covariance represented by a sparse star factor.

    The factor implies k00 = L00^2, k_i0 = L00 L_i0 and Schur complements
    L_ii^2, so the winged form follows without reconstructing the covariance.
    """
    if chol.off_diag.shape[0] and chol.off_diag.min().item() <= 0:
        raise DegenerateFactor("cannot invert a degenerate factor")
    l00 = chol.pivot_column[0]
    col = chol.pivot_column[1:]
    diag = 1.0 / chol.off_diag.square()
    wing = -col * diag / l00
    pivot = (1.0 + (col.square() * diag).sum()) / l00.square()
    return WingedPrecision(pivot_scalar=pivot, wing=wing, diag=diag)


def winged_matvec(prec: WingedPrecision, v: Tensor) -> Tensor:
    """Apply a winged-diagonal precision to v along the last axis, O(Q)."""
    v = torch.as_tensor(v, dtype=DTYPE)
    if v.shape[-1] != prec.dim:
        raise DimensionMismatch(f"vector length {v.shape[-1]} != dim {prec.dim}")
    head = prec.pivot_scalar * v[..., :1] + (prec.wing * v[..., 1:]).sum(-1, keepdim=True)
    tail = prec.wing * v[..., :1] + prec.diag * v[..., 1:]
    return torch.cat([head, tail], dim=-1)


def star_solve(chol: SparseStarCholesky, v: Tensor) -> Tensor:
    """Solve L x = v by forward substitution along the last axis, O(Q)."""
    v = torch.as_tensor(v, dtype=DTYPE)
    if v.shape[-1] != chol.dim:
        raise DimensionMismatch(f"vector length {v.shape[-1]} != dim {chol.dim}")
    if chol.off_diag.shape[0] and chol.off_diag.min().item() <= 0:
        raise DegenerateFactor("triangular solve undefined: zero diagonal entry")
    x0 = v[..., :1] / chol.pivot_column[0]
    rest = (v[..., 1:] - chol.pivot_column[1:] * x0) / chol.off_diag
    return torch.cat([x0, rest], dim=-1)


def star_matmul_vec(chol: SparseStarCholesky, v: Tensor) -> Tensor:
    """L v via the column + diagonal decomposition of the factor.

    One scalar-vector broadcast plus one elementwise product; broadcasts
    over any leading axes of v.
    """
    v = torch.as_tensor(v, dtype=DTYPE)
    if v.shape[-1] != chol.dim:
        raise DimensionMismatch(f"vector length {v.shape[-1]} != dim {chol.dim}")
    out = chol.pivot_column * v[..., :1]
    tail = chol.off_diag * v[..., 1:]
    pad = torch.zeros(v.shape[:-1] + (1,), dtype=DTYPE)
    return out + torch.cat([pad, tail], dim=-1)


def star_factor_batch(pivot_var: Tensor, cross: Tensor, diag: Tensor,
                      jitter: float = 0.0, tol: float = SCHUR_TOL):
    """Factor a whole batch of star covariances in one shot.

    pivot_var is (...,), cross and diag are (..., Q-1); returns the raw
    factor tensors (pivot_column (..., Q), off_diag (..., Q-1)) without
    wrapping each instance in a SparseStarCholesky.  Same formulas and the
    same clamp window as build_star_cholesky.
    """
    pivot_var = torch.as_tensor(pivot_var, dtype=DTYPE)
    cross = torch.as_tensor(cross, dtype=DTYPE)
    diag = torch.as_tensor(diag, dtype=DTYPE)
    if pivot_var.min().item() <= 0:
        raise NonPositivePivot(f"pivot variance {pivot_var.min().item()} must be > 0")
    l00 = torch.sqrt(pivot_var)
    col = cross / l00.unsqueeze(-1)
    schur = diag + jitter - cross.square() / pivot_var.unsqueeze(-1)
    if schur.numel():
        worst = schur.min().item()
        if worst < -tol:
            raise NegativeSchur(f"Schur complement {worst} below -{tol}")
        schur = schur.clamp(min=0.0)
    return torch.cat([l00.unsqueeze(-1), col], dim=-1), torch.sqrt(schur)


def star_logdet_batch(pivot_column: Tensor, off_diag: Tensor) -> Tensor:
    """Log-determinants for a batch of raw star factors, shape (...,)."""
    if off_diag.numel() and off_diag.min().item() <= 0:
        raise DegenerateFactor("log-determinant undefined: zero diagonal entry")
    return 2.0 * (torch.log(pivot_column[..., 0]) + torch.log(off_diag).sum(-1))


def kron_logdet(logdet_a: Tensor, dim_a: int, logdet_b: Tensor, dim_b: int) -> Tensor:
    """log det(A kron B) = dim_B log det A + dim_A log det B."""
    return dim_b * logdet_a + dim_a * logdet_b


def star_gram_diag(chol: SparseStarCholesky) -> Tensor:
    """Diagonal of L L' : (L00^2, L_i0^2 + L_ii^2)."""
    head = chol.pivot_column[:1].square()
    tail = chol.pivot_column[1:].square() + chol.off_diag.square()
    return torch.cat([head, tail])


def star_gram_pivot_col(chol: SparseStarCholesky) -> Tensor:
    """First column of L L' : L00 * pivot_column."""
    return chol.pivot_column[0] * chol.pivot_column


def winged_diag(prec: WingedPrecision) -> Tensor:
    """Full diagonal of the densified precision."""
    return torch.cat([prec.pivot_scalar.reshape(1), prec.diag])


def winged_star_trace(prec: WingedPrecision, chol: SparseStarCholesky) -> Tensor:
    """tr(Lambda L L') using only the 3Q-2 stored precision entries."""
    if prec.dim != chol.dim:
        raise DimensionMismatch(f"precision dim {prec.dim} != factor dim {chol.dim}")
    d = star_gram_diag(chol)
    c = star_gram_pivot_col(chol)
    return prec.pivot_scalar * d[0] + (prec.diag * d[1:]).sum() + 2.0 * (prec.wing * c[1:]).sum()
