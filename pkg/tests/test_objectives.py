import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from savp import tensor as T
from savp.model import Discriminator, DiscriminatorConfig, Encoder, EncoderConfig, Generator, GeneratorConfig
from savp.objectives import (
    Batch,
    LossWeights,
    Models,
    VariantSpec,
    assemble_objective,
    default_weights,
    kl_anneal_weight,
    loss_gan_discriminator,
    loss_gan_generator,
    loss_kl,
    loss_reconstruction,
)
from savp.tensor import Tape, Tensor, backward

from conftest import kl_monte_carlo

LN2 = np.log(2.0)


class TestReconstruction:
    def test_zero_for_identical(self, rng):
        x = rng.uniform(0, 1, (2, 3, 1, 4, 4))
        assert loss_reconstruction(x, Tensor(x), "l1").item() == 0.0

    def test_constant_offset(self, rng):
        x = rng.uniform(0, 1, (2, 3, 1, 4, 4))
        assert loss_reconstruction(x, Tensor(x + 0.5), "l1").item() == pytest.approx(0.5)
        assert loss_reconstruction(x, Tensor(x + 0.5), "l2").item() == pytest.approx(0.25)

    def test_matches_direct_sum(self, rng):
        x, y = rng.uniform(0, 1, (2, 3, 1, 5, 5)), rng.uniform(0, 1, (2, 3, 1, 5, 5))
        direct_l1 = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size
        direct_l2 = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
        assert abs(loss_reconstruction(x, Tensor(y), "l1").item() - direct_l1) < 1e-12
        assert abs(loss_reconstruction(x, Tensor(y), "l2").item() - direct_l2) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_reconstruction(np.zeros((2, 2)), Tensor(np.zeros((2, 3))))

    def test_l2_optimum_is_mode_mean(self):
        # four equally likely futures, each lighting one distinct pixel
        futures = np.zeros((4, 1, 1, 1, 2, 2))
        for k, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            futures[k, ..., i, j] = 1.0
        targets = futures.reshape(4, 1, 1, 2, 2)

        def expected_loss(c):
            pred = Tensor(np.full((4, 1, 1, 2, 2), c))
            return loss_reconstruction(targets, pred, "l2").item()

        grid = np.linspace(0, 1, 401)
        best = grid[np.argmin([expected_loss(c) for c in grid])]
        assert best == pytest.approx(0.25)
        # analytic: d/dc [ (1-c)^2 / 4 + 3 c^2 / 4 ] = 0 at c = 1/4
        assert expected_loss(0.25) == pytest.approx((0.75**2 + 3 * 0.25**2) / 4)


class TestKL:
    def test_standard_normal_is_zero(self):
        assert loss_kl(Tensor(np.zeros((3, 2, 4))), Tensor(np.zeros((3, 2, 4)))).item() == 0.0

    def test_unit_mean_shift(self):
        assert loss_kl(Tensor(np.ones((1, 1, 1))), Tensor(np.zeros((1, 1, 1)))).item() == pytest.approx(0.5)

    def test_sigma_two(self):
        val = loss_kl(Tensor(np.zeros((1, 1, 1))), Tensor(np.full((1, 1, 1), np.log(2.0)))).item()
        assert val == pytest.approx(0.5 * (4 - 1 - np.log(4)))
        assert val == pytest.approx(0.8069, abs=1e-4)

    def test_averages_over_batch(self, rng):
        mu, ls = rng.standard_normal((1, 3, 2)), rng.standard_normal((1, 3, 2))
        single = loss_kl(Tensor(mu), Tensor(ls)).item()
        double = loss_kl(Tensor(np.concatenate([mu, mu])), Tensor(np.concatenate([ls, ls]))).item()
        assert double == pytest.approx(single)

    def test_monte_carlo(self):
        rng = np.random.default_rng(11)
        mu = rng.standard_normal((2, 2, 2))
        sigma = np.exp(rng.uniform(-1, 0.5, (2, 2, 2)))
        closed = loss_kl(Tensor(mu), Tensor(np.log(sigma))).item()
        est, se = kl_monte_carlo(mu, sigma, 100_000, rng)
        assert abs(closed - est) < 3 * se

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-10, 10)), min_size=1, max_size=6))
    def test_nonnegative(self, pairs):
        mu = np.array([[p[0] for p in pairs]])[:, None]
        ls = np.array([[p[1] for p in pairs]])[:, None]
        val = loss_kl(Tensor(mu), Tensor(ls)).item()
        assert np.isfinite(val)
        assert val >= -1e-9
        if np.all(mu == 0) and np.all(ls == 0):
            assert abs(val) < 1e-9
        else:
            assert val > 0 or np.allclose(mu, 0) and np.allclose(ls, 0, atol=1e-4)


class TestGANLosses:
    def test_discriminator_at_chance(self):
        assert loss_gan_discriminator(Tensor([0.0]), Tensor([0.0])).item() == pytest.approx(2 * LN2)

    def test_perfect_discriminator(self):
        assert loss_gan_discriminator(Tensor([800.0]), Tensor([-800.0])).item() == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_discriminator_direct_formula(self, r, f):
        d_real = 1 / (1 + np.exp(-r))
        d_fake = 1 / (1 + np.exp(-f))
        direct = -np.log(d_real) - np.log(1 - d_fake)
        assert abs(loss_gan_discriminator(Tensor([r]), Tensor([f])).item() - direct) < 1e-9

    def test_generator_values(self):
        assert loss_gan_generator(Tensor([0.0])).item() == pytest.approx(LN2)
        assert loss_gan_generator(Tensor([800.0])).item() == pytest.approx(0.0, abs=1e-12)

    def test_generator_gradient_raises_fake_logits(self, rng):
        logits = rng.uniform(-3, 3, 5)
        eps = 1e-5
        for i in range(5):
            hi, lo = logits.copy(), logits.copy()
            hi[i] += eps
            lo[i] -= eps
            slope = (loss_gan_generator(Tensor(hi)).item() - loss_gan_generator(Tensor(lo)).item()) / (2 * eps)
            assert slope < 0  # descent increases the logit
        x = Tensor(logits, requires_grad=True)
        with Tape():
            g = backward(loss_gan_generator(x))[x]
        assert np.all(g < 0)


class TestWeights:
    def test_kl_anneal_points(self):
        w = LossWeights(kl=0.01, kl_start=100, kl_end=300)
        assert kl_anneal_weight(0, w) == 0.0
        assert kl_anneal_weight(99, w) == 0.0
        assert kl_anneal_weight(200, w) == pytest.approx(0.005)
        assert kl_anneal_weight(300, w) == 0.01
        assert kl_anneal_weight(10_000, w) == 0.01

    def test_defaults(self):
        assert default_weights("gan").l1 == 100 and default_weights("savp").l1 == 100
        assert default_weights("vae").l1 == 1 and default_weights("deterministic").l1 == 1
        assert default_weights("savp").kl == pytest.approx(0.1)
        assert default_weights("vae").kl == pytest.approx(0.001)
        assert default_weights("deterministic").kl == 0 and default_weights("deterministic").gan == 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            LossWeights(kl=-1.0)
        with pytest.raises(ValueError):
            LossWeights(kl_start=5, kl_end=1)
        with pytest.raises(ValueError):
            VariantSpec("diffusion")


# -- assembly ---------------------------------------------------------------------


@pytest.fixture
def parts():
    rng = np.random.default_rng(0)
    gcfg = GeneratorConfig(n_z=2, hidden=(3, 4, 4), latent_hidden=3, n_kernels=2, kernel_size=3)
    return dict(
        G=Generator(gcfg, rng, np.float64),
        E=Encoder(EncoderConfig(n_z=2, widths=(3, 4, 4)), rng, np.float64),
        D=Discriminator(DiscriminatorConfig(widths=(2, 3, 3, 4), power_iters=0), rng, np.float64),
        Dv=Discriminator(DiscriminatorConfig(widths=(2, 3, 3, 4), power_iters=0), rng, np.float64),
    )


@pytest.fixture
def batch():
    frames = np.random.default_rng(1).uniform(0, 1, (2, 4, 1, 16, 16))
    return Batch(frames, context=1, teacher_forcing=np.array([True, False, False]))


class TestAssemble:
    def test_savp_terms_and_decomposition(self, parts, batch):
        w = LossWeights(l1=3.0, kl=0.5, gan=1.0)
        savp = assemble_objective(
            VariantSpec("savp"), batch, Models(parts["G"], parts["E"], parts["D"], parts["Dv"]),
            np.random.default_rng(5), 0, w,
        )
        for term in ("recon", "kl", "gan_g", "gan_g_vae", "d_D", "d_D_vae"):
            assert term in savp.diagnostics
        vae = assemble_objective(
            VariantSpec("vae"), batch, Models(parts["G"], parts["E"]), np.random.default_rng(5), 0, w
        )
        assert savp.diagnostics["recon"] == vae.diagnostics["recon"]
        assert savp.diagnostics["kl"] == vae.diagnostics["kl"]
        assert 3.0 * savp.diagnostics["recon"] + 0.5 * savp.diagnostics["kl"] == vae.diagnostics["total"]

    def test_savp_adversarial_only(self, parts, batch):
        w = LossWeights(l1=0.0, kl=0.0, gan=1.0)
        obj = assemble_objective(
            VariantSpec("savp"), batch, Models(parts["G"], parts["E"], parts["D"], parts["Dv"]),
            np.random.default_rng(5), 0, w,
        )
        d = obj.diagnostics
        assert abs(d["total"] - (d["gan_g"] + d["gan_g_vae"])) < 1e-9

    def test_encoder_loss_excludes_prior_term(self, parts, batch):
        w = LossWeights(l1=2.0, kl=0.5, gan=1.0)
        obj = assemble_objective(
            VariantSpec("savp"), batch, Models(parts["G"], parts["E"], parts["D"], parts["Dv"]),
            np.random.default_rng(5), 0, w,
        )
        d = obj.diagnostics
        expect = 2.0 * d["recon"] + 0.5 * d["kl"] + d["gan_g_vae"]
        assert obj.encoder_loss.item() == pytest.approx(expect, rel=1e-12)

    def test_deterministic_ignores_rng(self, parts, batch):
        models = Models(parts["G"])
        a = assemble_objective(VariantSpec("deterministic", "l2"), batch, models, np.random.default_rng(1), 0)
        b = assemble_objective(VariantSpec("deterministic", "l2"), batch, models, np.random.default_rng(2), 0)
        assert a.generator_loss.item() == b.generator_loss.item()

    def test_model_set_must_match_variant(self, parts, batch):
        with pytest.raises(ValueError, match="needs model E"):
            assemble_objective(VariantSpec("vae"), batch, Models(parts["G"]), np.random.default_rng(0), 0)
        with pytest.raises(ValueError, match="does not use"):
            assemble_objective(
                VariantSpec("deterministic"), batch, Models(parts["G"], parts["E"]), np.random.default_rng(0), 0
            )

    def test_all_losses_finite_at_extremes(self, parts, batch):
        parts["E"].logsigma_head.bias.data[...] = 40.0  # clamps to +10
        obj = assemble_objective(
            VariantSpec("savp"), Batch(np.round(batch.frames), 1, teacher_forcing=batch.teacher_forcing),
            Models(parts["G"], parts["E"], parts["D"], parts["Dv"]), np.random.default_rng(0), 10**6,
        )
        assert all(np.isfinite(v) for v in obj.diagnostics.values())
