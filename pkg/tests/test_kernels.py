"""Kernel values, separability identity, delta correction, gram properties."""

import math

import numpy as np
import pytest
import torch

from stargp.errors import (
    ConfigError,
    DimensionMismatch,
    MissingPivot,
    PivotNotInvertible,
    PointwiseDeltaUnsupported,
)
from stargp.kernels import (
    Constant,
    DeltaCorrection,
    Epanechnikov,
    FeatureMatrix,
    Kernel,
    Periodic,
    Product,
    RBF,
    RickerWavelet,
    build_kernel,
    ricker,
    split_delta,
    verify_implicit_sparsity,
)
from stargp.star import StarCovariance, build_star_cholesky


def psi(t):
    return (1 - t * t) * math.exp(-t * t / 2)


class TestPointwise:
    def test_ricker_mother(self):
        assert ricker(torch.tensor(0.0, dtype=torch.float64)).item() == 1.0
        assert ricker(torch.tensor(1.0, dtype=torch.float64)).item() == 0.0
        t = 1.7
        assert ricker(torch.tensor(t, dtype=torch.float64)).item() == pytest.approx(psi(t), rel=1e-15)

    def test_ricker_kernel_values(self):
        k = RickerWavelet(dilation=1.0)
        assert k.eval([0.0], [0.0]).item() == 1.0
        # psi(1) = 0 so anything against a=1 vanishes
        assert k.eval([1.0], [2.0]).item() == pytest.approx(0.0, abs=1e-16)
        assert k.eval([0.5], [0.9]).item() == pytest.approx(psi(0.5) * psi(0.9), rel=1e-14)
        k2 = RickerWavelet(dilation=[2.0, 3.0])
        a, b = [0.3, 0.4], [0.1, 0.2]
        want = psi(0.3 / 2) * psi(0.4 / 3) * psi(0.1 / 2) * psi(0.2 / 3)
        assert k2.eval(a, b).item() == pytest.approx(want, rel=1e-14)

    def test_rbf_values(self):
        k = RBF(lengthscales=1.0, variance=1.0)
        assert k.eval([0.7, -0.1], [0.7, -0.1]).item() == 1.0
        assert k.eval([0.0], [2.0]).item() == pytest.approx(math.exp(-2.0), rel=1e-14)
        k2 = RBF(lengthscales=[1.0, 2.0], variance=3.0)
        want = 3.0 * math.exp(-0.5 * ((1.0 / 1.0) ** 2 + (2.0 / 2.0) ** 2))
        assert k2.eval([0.0, 0.0], [1.0, 2.0]).item() == pytest.approx(want, rel=1e-14)

    def test_periodic_values(self):
        k = Periodic(period=2.0, lengthscale=0.5, variance=1.5)
        assert k.eval([0.3], [0.3]).item() == pytest.approx(1.5)
        # a full period apart is exact recurrence
        assert k.eval([0.0], [2.0]).item() == pytest.approx(1.5, abs=1e-12)
        want = 1.5 * math.exp(-2.0 * math.sin(math.pi * 0.7 / 2.0) ** 2 / 0.25)
        assert k.eval([0.0], [0.7]).item() == pytest.approx(want, rel=1e-14)

    def test_epanechnikov_values(self):
        k = Epanechnikov(bandwidth=2.0)
        assert k.eval([0.0], [0.0]).item() == 1.0
        assert k.eval([0.0], [1.0]).item() == pytest.approx(0.75)
        assert k.eval([0.0], [2.0]).item() == 0.0
        assert k.eval([0.0], [5.0]).item() == 0.0  # clamped, not negative

    def test_constant_and_product(self):
        k = Product([Constant(value=2.0), RBF(lengthscales=1.0, variance=1.0)])
        assert k.eval([0.0], [0.0]).item() == pytest.approx(2.0)
        assert k.eval([0.0], [1.0]).item() == pytest.approx(2.0 * math.exp(-0.5), rel=1e-14)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        kernels = [
            RBF(lengthscales=[0.7, 1.3], variance=2.0),
            Epanechnikov(bandwidth=1.1),
            RickerWavelet(dilation=[1.5, 0.8]),
            Constant(value=0.4),
            Product([RickerWavelet(dilation=2.0), Constant(value=1.2)]),
        ]
        for k in kernels:
            for _ in range(20):
                a = rng.uniform(-2, 2, size=2)
                b = rng.uniform(-2, 2, size=2)
                assert k.eval(a, b).item() == pytest.approx(k.eval(b, a).item(), abs=1e-15)
        kp = Periodic(period=1.3, lengthscale=0.6)
        for _ in range(20):
            a, b = rng.uniform(-2, 2, size=2)
            assert kp.eval([a], [b]).item() == pytest.approx(kp.eval([b], [a]).item(), abs=1e-15)

    def test_positivity_enforced(self):
        with pytest.raises(ConfigError):
            RBF(lengthscales=0.0)
        with pytest.raises(ConfigError):
            RBF(variance=-1.0)
        with pytest.raises(ConfigError):
            Epanechnikov(bandwidth=0.0)
        with pytest.raises(ConfigError):
            DeltaCorrection(variance=0.0)
        with pytest.raises(ConfigError):
            Product([])

    def test_log_space_storage(self):
        k = RBF(lengthscales=[0.5, 2.0], variance=3.0)
        names = dict(k.named_parameters())
        assert set(names) == {"log_lengthscales", "log_variance"}
        assert torch.allclose(names["log_lengthscales"].exp(),
                              torch.tensor([0.5, 2.0], dtype=torch.float64))


class TestGram:
    def test_constant_gram(self):
        H = FeatureMatrix(values=torch.zeros(3, 1))
        g = Constant(value=0.7).gram(H)
        assert torch.allclose(g, torch.full((3, 3), 0.7, dtype=torch.float64))

    def test_delta_corrected_wavelet_gram(self):
        H = FeatureMatrix(values=torch.tensor([[0.0], [1.0], [2.0]]))
        k = Product([RickerWavelet(dilation=1.0),
                     DeltaCorrection(variance=0.3, exclude_pivot=True)])
        g = k.gram(H, pivot_index=0)
        assert g[0, 0].item() == pytest.approx(1.0)            # pivot untouched
        assert g[1, 1].item() == pytest.approx(0.0 + 0.3)      # psi(1)^2 = 0
        assert g[2, 2].item() == pytest.approx(psi(2.0) ** 2 + 0.3, rel=1e-14)
        assert g[0, 1].item() == pytest.approx(0.0, abs=1e-16)  # psi(1) = 0

    def test_delta_needs_pivot(self):
        H = FeatureMatrix(values=torch.zeros(3, 1))
        k = Product([Constant(value=1.0), DeltaCorrection(variance=0.1)])
        with pytest.raises(MissingPivot):
            k.gram(H)
        g = k.gram(H, pivot_index=1)
        assert g[1, 1].item() == pytest.approx(1.0)
        assert g[0, 0].item() == pytest.approx(1.1)

    def test_delta_include_pivot_variant(self):
        H = FeatureMatrix(values=torch.zeros(2, 1))
        k = Product([Constant(value=1.0),
                     DeltaCorrection(variance=0.5, exclude_pivot=False)])
        g = k.gram(H)  # no pivot needed
        assert g[0, 0].item() == pytest.approx(1.5)
        assert g[1, 1].item() == pytest.approx(1.5)

    def test_delta_pointwise_rejected(self):
        k = Product([Constant(value=1.0), DeltaCorrection(variance=0.1)])
        with pytest.raises(PointwiseDeltaUnsupported):
            k.eval([0.0], [0.0])
        with pytest.raises(PointwiseDeltaUnsupported):
            DeltaCorrection(variance=0.1).eval([0.0], [0.0])

    def test_cross_gram_gets_no_delta(self):
        A = FeatureMatrix(values=torch.tensor([[0.1], [0.2]]))
        B = FeatureMatrix(values=torch.tensor([[0.1], [0.2]]))
        k = Product([Constant(value=1.0), DeltaCorrection(variance=9.0, exclude_pivot=False)])
        cross = k.gram(A, B)
        assert torch.allclose(cross, torch.ones(2, 2, dtype=torch.float64))
        self_g = k.gram(A, A)
        assert self_g[0, 0].item() == pytest.approx(10.0)

    def test_rbf_gram_psd(self):
        rng = np.random.default_rng(9)
        H = FeatureMatrix(values=torch.tensor(rng.standard_normal((12, 3))))
        g = RBF(lengthscales=[0.8, 1.0, 1.4], variance=2.0).gram(H)
        assert torch.allclose(g, g.T, atol=1e-14)
        ev = np.linalg.eigvalsh(g.detach().numpy())
        assert ev.min() > -1e-10

    def test_diag_self_matches_gram_diagonal(self):
        rng = np.random.default_rng(10)
        vals = torch.tensor(rng.uniform(-1, 1, size=(6, 2)))
        H = FeatureMatrix(values=vals)
        kernels = [
            RBF(lengthscales=[0.8, 1.1], variance=1.7),
            Epanechnikov(bandwidth=3.0),
            RickerWavelet(dilation=[1.2, 2.0]),
            Constant(value=0.6),
            Product([RickerWavelet(dilation=1.4), DeltaCorrection(variance=0.25)]),
        ]
        for k in kernels:
            want = torch.diagonal(k.gram(H, pivot_index=0))
            got = k.diag_self(vals, pivot_index=0)
            assert torch.allclose(got, want, atol=1e-14)

    def test_active_dims(self):
        vals = torch.tensor([[0.0, 5.0], [1.0, -3.0]])
        k = RBF(lengthscales=1.0, variance=1.0, active_dims=[0])
        # second column must be invisible
        assert k.eval(vals[0], vals[1]).item() == pytest.approx(math.exp(-0.5), rel=1e-14)
        kp = Periodic(period=1.0, active_dims=[1])
        assert kp.eval([99.0, 0.25], [7.0, 0.25]).item() == pytest.approx(1.0)
        with pytest.raises(DimensionMismatch):
            Periodic(period=1.0).eval([0.0, 1.0], [0.0, 1.0])


class TestSeparability:
    def test_flags(self):
        assert RickerWavelet(dilation=1.0).separable
        assert Constant(value=1.0).separable
        assert not RBF().separable
        assert not Periodic().separable
        assert not Epanechnikov().separable
        assert Product([RickerWavelet(dilation=1.0), Constant(value=2.0)]).separable
        assert not Product([RickerWavelet(dilation=1.0), RBF()]).separable
        # the index-keyed correction breaks separability of the whole spec
        assert not Product([RickerWavelet(dilation=1.0), DeltaCorrection(variance=0.1)]).separable

    def test_wavelet_passes_identity(self):
        H = FeatureMatrix(values=torch.tensor([[0.1], [0.5], [0.9]]))
        rep = verify_implicit_sparsity(RickerWavelet(dilation=1.0), H, pivot=0, tol=1e-10)
        assert rep.passed
        assert rep.max_violation < 1e-12

    def test_constant_exact(self):
        H = FeatureMatrix(values=torch.tensor(np.random.default_rng(3).standard_normal((5, 2))))
        rep = verify_implicit_sparsity(Constant(value=2.5), H, pivot=2)
        assert rep.passed
        assert rep.max_violation == 0.0

    def test_rbf_fails_identity(self):
        H = FeatureMatrix(values=torch.tensor([[0.0], [1.0], [2.0]]))
        rep = verify_implicit_sparsity(RBF(lengthscales=1.0), H, pivot=0, tol=1e-10)
        assert not rep.passed
        # worst pair is the (2,2) diagonal: K22 = 1 vs implied e^-2 * e^-2
        assert rep.max_violation == pytest.approx(1.0 - math.exp(-4.0), rel=1e-12)
        # the off-diagonal identity also breaks: K12 = e^-1/2 vs e^-5/2
        assert rep.max_violation > abs(math.exp(-0.5) - math.exp(-2.5))

    def test_separable_certificate_random(self):
        rng = np.random.default_rng(31)
        for trial in range(10):
            d = int(rng.integers(1, 4))
            k = Product([RickerWavelet(dilation=rng.uniform(0.8, 2.0, size=d)),
                         Constant(value=rng.uniform(0.5, 2.0))])
            # keep features below the wavelet zero crossing so the pivot
            # self-covariance stays well away from 0
            H = FeatureMatrix(values=torch.tensor(rng.uniform(-0.6, 0.6, size=(6, d))))
            rep = verify_implicit_sparsity(k, H, pivot=int(rng.integers(0, 6)))
            assert rep.passed, rep

    def test_pivot_not_invertible(self):
        # dilation 1 and h = 1 puts the wavelet exactly at its zero
        H = FeatureMatrix(values=torch.tensor([[1.0], [0.5]]))
        with pytest.raises(PivotNotInvertible):
            verify_implicit_sparsity(RickerWavelet(dilation=1.0), H, pivot=0)

    def test_separable_gram_is_rank_one(self):
        rng = np.random.default_rng(41)
        H = FeatureMatrix(values=torch.tensor(rng.uniform(-0.5, 0.5, size=(8, 2))))
        k = RickerWavelet(dilation=[1.0, 1.5])
        s = np.linalg.svd(k.gram(H).detach().numpy(), compute_uv=False)
        assert s[1] < 1e-8 * s[0]

    def test_delta_restores_full_rank(self):
        rng = np.random.default_rng(43)
        sigma = 0.35
        H = FeatureMatrix(values=torch.tensor(rng.uniform(-0.5, 0.5, size=(5, 1))))
        k = Product([RickerWavelet(dilation=1.0),
                     DeltaCorrection(variance=sigma ** 2, exclude_pivot=True)])
        g = k.gram(H, pivot_index=0).detach()
        cov = StarCovariance(pivot_var=g[0, 0], cross=g[1:, 0], diag=torch.diagonal(g)[1:])
        chol = build_star_cholesky(cov)
        assert torch.allclose(chol.off_diag,
                              torch.full((4,), sigma, dtype=torch.float64), atol=1e-12)

    def test_split_delta(self):
        rw = RickerWavelet(dilation=1.0)
        dc = DeltaCorrection(variance=0.1)
        core, deltas = split_delta(Product([rw, dc]))
        assert core is rw and deltas == [dc]
        core, deltas = split_delta(rw)
        assert core is rw and deltas == []
        core, deltas = split_delta(dc)
        assert core is None and deltas == [dc]
        with pytest.raises(PointwiseDeltaUnsupported):
            verify_implicit_sparsity(dc, FeatureMatrix(values=torch.zeros(2, 1)))


class TestConfigBuilder:
    def test_leaf_and_product(self):
        k = build_kernel({"type": "rbf", "lengthscales": [0.5, 1.5], "variance": 2.0})
        assert isinstance(k, RBF)
        assert torch.allclose(k.log_lengthscales.exp(),
                              torch.tensor([0.5, 1.5], dtype=torch.float64))
        p = build_kernel({"type": "product", "factors": [
            {"type": "ricker", "dilation": 2.0},
            {"type": "delta", "variance": 0.09},
        ]})
        assert isinstance(p, Product) and p.separable is False
        assert isinstance(split_delta(p)[0], RickerWavelet)

    def test_bare_list_is_product(self):
        p = build_kernel([{"type": "constant", "value": 2.0},
                          {"type": "epanechnikov", "bandwidth": 1.0}])
        assert isinstance(p, Product)

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            build_kernel({"type": "nope"})
        with pytest.raises(ConfigError):
            build_kernel({"lengthscales": 1.0})
        with pytest.raises(ConfigError):
            build_kernel({"type": "product"})
