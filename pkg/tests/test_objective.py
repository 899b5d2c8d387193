import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from lapreg.data import generate_synthetic_pair
from lapreg.model import GaussianFieldParams, ModelConfig, build_model
from lapreg.objective import (
    LossWeights,
    diffusion_regularizer,
    gaussian_log_likelihood,
    image_pyramid,
    kl_diag_gaussian,
    local_ncc,
    local_ncc_map,
    total_loss,
)


def params(mu, sigma):
    mu = torch.as_tensor(mu, dtype=torch.float64)
    return GaussianFieldParams(mu, torch.log(torch.as_tensor(sigma, dtype=torch.float64)).expand_as(mu))


class TestKL:
    def test_prior_is_zero(self):
        assert kl_diag_gaussian(params(torch.zeros(1, 2, 4, 4), 1.0)).item() == 0.0

    def test_unit_mean(self):
        assert kl_diag_gaussian(params([1.0], 1.0)).item() == pytest.approx(0.5)

    def test_sigma_two(self):
        assert kl_diag_gaussian(params([0.0], 2.0)).item() == pytest.approx(0.5 * (4 - 1 - math.log(4)))

    def test_reductions(self):
        p = params(torch.randn(2, 2, 3, 3, dtype=torch.float64), 0.7)
        per = kl_diag_gaussian(p, "none")
        assert per.shape == (2, 2, 3, 3)
        assert kl_diag_gaussian(p, "sum").item() == pytest.approx(per.sum().item())
        assert kl_diag_gaussian(p, "mean").item() == pytest.approx(per.mean().item())
        with pytest.raises(ValueError):
            kl_diag_gaussian(p, "max")

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(-4, 2))
    def test_nonnegative(self, mu, log_sigma):
        p = GaussianFieldParams(torch.tensor([mu], dtype=torch.float64),
                                torch.tensor([log_sigma], dtype=torch.float64))
        assert kl_diag_gaussian(p).item() >= -1e-12

    def test_non_finite(self):
        with pytest.raises(ValueError):
            kl_diag_gaussian(params([float("nan")], 1.0))


def ncc_loop(a, b, k):
    """Brute-force squared local correlation with replicate borders."""
    H, W = a.shape
    r = k // 2
    out = np.zeros_like(a)
    for i in range(H):
        for j in range(W):
            rows = [min(max(i + di, 0), H - 1) for di in range(-r, r + 1)]
            cols = [min(max(j + dj, 0), W - 1) for dj in range(-r, r + 1)]
            pa = a[np.ix_(rows, cols)].ravel()
            pb = b[np.ix_(rows, cols)].ravel()
            da, db = pa - pa.mean(), pb - pb.mean()
            cross = (da * db).sum()
            out[i, j] = min(max(cross * cross / ((da * da).sum() * (db * db).sum() + 1e-5), 0), 1)
    return out


class TestNCC:
    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((8, 7)), rng.random((8, 7))
        got = local_ncc_map(torch.as_tensor(a)[None, None], torch.as_tensor(b)[None, None], 3)[0, 0]
        np.testing.assert_allclose(got.numpy(), ncc_loop(a, b, 3), atol=1e-10)

    def test_self_similarity(self):
        a = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        assert local_ncc(a, a, 5).item() == pytest.approx(1.0, abs=1e-3)

    def test_affine_invariance(self):
        a = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        b = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        assert local_ncc(a, 3 * b + 2, 5).item() == pytest.approx(local_ncc(a, b, 5).item(), abs=1e-3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([3, 5, 7]))
    def test_range_and_symmetry(self, seed, k):
        g = torch.Generator().manual_seed(seed)
        a = torch.rand(1, 1, 9, 9, generator=g, dtype=torch.float64)
        b = torch.rand(1, 1, 9, 9, generator=g, dtype=torch.float64)
        v = local_ncc(a, b, k).item()
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(local_ncc(b, a, k).item(), abs=1e-6)

    def test_constant_inputs_are_finite(self):
        a = torch.zeros(1, 1, 8, 8)
        assert torch.isfinite(local_ncc(a, a, 3))

    def test_3d(self):
        a = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)
        assert local_ncc(a, a, 3).item() == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("k", [4, 0, 11])
    def test_bad_window(self, k):
        with pytest.raises(ValueError):
            local_ncc(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), k)


class TestRegularizer:
    def test_constant_field(self):
        assert diffusion_regularizer(torch.ones(1, 2, 6, 6)).item() == 0.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal((1, 2, 4, 5))
        total = 0.0
        for i in range(4):
            for j in range(5):
                for c in range(2):
                    di = u[0, c, min(i + 1, 3), j] - u[0, c, i, j]
                    dj = u[0, c, i, min(j + 1, 4)] - u[0, c, i, j]
                    total += di * di + dj * dj
        assert diffusion_regularizer(torch.as_tensor(u)).item() == pytest.approx(total / 20, rel=1e-12)


def test_gaussian_log_likelihood_matches_scipy():
    rng = np.random.default_rng(2)
    t, p = rng.standard_normal(10), rng.standard_normal(10)
    got = gaussian_log_likelihood(torch.as_tensor(t), torch.as_tensor(p), 0.3).item()
    assert got == pytest.approx(norm.logpdf(t, p, math.sqrt(0.3)).sum(), rel=1e-12)


class TestWeights:
    def test_published_defaults(self):
        w = LossWeights()
        assert (w.beta, w.gamma, w.lam, w.sigma_sq(0), w.sigma_sq(2)) == (0.1, 0.05, 0.025, 0.25, 1.0)

    def test_level_and_window_vectors(self):
        assert [LossWeights.level_weight(l, 2) for l in range(4)] == [1, 4, 16, 64]
        assert [LossWeights.level_weight(l, 3) for l in range(4)] == [1, 8, 64, 512]
        assert [LossWeights.window(l, 4) for l in range(4)] == [9, 7, 5, 3]

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1)
        with pytest.raises(ValueError):
            LossWeights(sigma_sq_top=0)
        with pytest.raises(ValueError):
            LossWeights(kl_normalization="batch")


@pytest.fixture(scope="module")
def fresh():
    model = build_model(ModelConfig(base_channels=4)).double()
    g = torch.Generator().manual_seed(0)
    m = torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64)
    f = torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64)
    return model, m, f


class TestTotalLoss:
    def test_identity_configuration(self, fresh):
        model = fresh[0]
        m = generate_synthetic_pair(0, size=32).moving.tensor(torch.float64)
        out = model(m, m, mode="mean")
        w = LossWeights()
        _, parts = total_loss(out, m, m, w)
        assert parts["reg"].item() == 0.0
        expected = -w.gamma * sum(LossWeights.level_weight(l, 2) / w.sigma_sq(l) * parts[f"ncc_l{l}"].item()
                                  for l in range(4))
        assert parts["sim"].item() == pytest.approx(expected)
        for l in range(4):
            assert parts[f"ncc_l{l}"].item() == pytest.approx(1.0, abs=1e-2)

    def test_beta_zero_removes_kl(self, fresh):
        model, m, f = fresh
        out = model(m, f, mode="sample", rng=torch.Generator().manual_seed(1))
        total, parts = total_loss(out, m, f, LossWeights(beta=0.0))
        assert parts["kl"].item() == 0.0
        assert total.item() == (parts["sim"] + parts["reg"]).item()

    def test_kl_normalizations(self, fresh):
        model, m, f = fresh
        out = model(m, f, mode="mean")
        _, img = total_loss(out, m, f, LossWeights(kl_normalization="image"))
        _, lvl = total_loss(out, m, f, LossWeights(kl_normalization="level"))
        means = [img[f"kl_l{l}"].item() for l in range(4)]
        assert img["kl"].item() == pytest.approx(0.1 * sum(means), rel=1e-9)
        assert lvl["kl"].item() == pytest.approx(0.1 * sum(4 ** l * k for l, k in enumerate(means)), rel=1e-9)

    def test_breakdown_matches_terms(self, fresh):
        model, m, f = fresh
        out = model(m, f, mode="mean")
        total, parts = total_loss(out, m, f, LossWeights())
        f_pyr = image_pyramid(f, 4)
        for l, lvl in enumerate(out.levels):
            assert parts[f"ncc_l{l}"].item() == pytest.approx(
                local_ncc(lvl.f_hat, f_pyr[l], 9 - 2 * l).item())
            assert parts[f"kl_l{l}"].item() == pytest.approx(kl_diag_gaussian(lvl.posterior, "mean").item())
        assert total.item() == pytest.approx((parts["kl"] + parts["sim"] + parts["reg"]).item())

    def test_ablation_zeroes_upper_levels(self):
        model = build_model(ModelConfig(base_channels=4, nonhierarchical_ablation=True)).double()
        m = torch.rand(1, 1, 32, 32, dtype=torch.float64)
        out = model(m, torch.rand_like(m), mode="sample", rng=torch.Generator().manual_seed(0))
        _, parts = total_loss(out, m, torch.rand_like(m), LossWeights())
        for l in range(1, 4):
            for term in ("kl", "ncc", "reg"):
                assert parts[f"{term}_l{l}"].item() == 0.0
        assert parts["ncc_l0"].item() > 0
