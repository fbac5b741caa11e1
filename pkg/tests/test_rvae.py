import numpy as np
import pytest

from curvpriv import autodiff as ad
from curvpriv.autodiff import Tensor, backward
from curvpriv.dataio import synth_manifold
from curvpriv.errors import ContractError
from curvpriv.rvae import (
    PosteriorParams,
    RvaeModel,
    gaussian_nll,
    kl_bm,
    kl_bm_taped,
    loss_mu,
    loss_sigma,
    normalize_latent_scale,
    reparameterize,
    spline_distance_sq,
)

M = 16
D = 2
LOG_2PI = np.log(2 * np.pi)


def small_model(rng, floor=1e-2, kl_weight=1.0):
    return RvaeModel(
        data_dim=M, latent_dim=D, hidden=24, n_centers=4, rng=rng,
        sigma_floor=floor, kl_weight=kl_weight,
    )


def force_unit_sigma(model):
    """Make the decoder standard deviation exactly 1 everywhere.

    floor of 1 plus weights pushed to softplus(-1e3) ~ 0 gives beta == 1.0
    to double precision."""
    model.decoder_sigma.floor = 1.0
    model.decoder_sigma.w_raw.data = np.full_like(model.decoder_sigma.w_raw.data, -1e3)


class TestEncode:
    def test_zero_weight_encoder_outputs_bias(self, rng):
        model = small_model(rng)
        for layer in model.trunk.layers:
            layer.W.data = np.zeros_like(layer.W.data)
            layer.b.data = np.zeros_like(layer.b.data)
        model.head_mu.W.data = np.zeros_like(model.head_mu.W.data)
        model.head_mu.b.data = np.array([0.3, -0.7])
        q = model.encode(rng.random((5, M)))
        assert np.allclose(q.mu, [0.3, -0.7])

    def test_identical_inputs_identical_posteriors(self, rng):
        model = small_model(rng)
        x = rng.random(M)
        q = model.encode(np.stack([x, x]))
        assert np.array_equal(q.mu[0], q.mu[1])
        assert q.sigma[0] == q.sigma[1]

    def test_posterior_scale_positive(self, rng):
        model = small_model(rng)
        q = model.encode(rng.random((20, M)))
        assert (q.sigma > 0).all()


class TestDecodeSample:
    def test_zero_noise_returns_mean(self, rng):
        model = small_model(rng)
        z = rng.standard_normal((3, D))
        x = model.decode_sample(z, eps=None)
        with ad.no_grad():
            mu = model.decoder_mu(Tensor(z)).data
        assert np.array_equal(x, mu)

    def test_far_field_variance_matches_floor(self, rng):
        model = small_model(rng, floor=1e-2)
        z = np.full((1, D), 300.0)  # numerically far from every center
        draws = np.random.default_rng(0).standard_normal((10_000, M))
        samples = np.stack([model.decode_sample(z, eps=draws[i : i + 1])[0] for i in range(0, 10_000, 100)])
        # sigma -> floor^(-1/2), so Var -> 1/floor
        var = samples.var(axis=0).mean()
        assert abs(var - 1.0 / 1e-2) / (1.0 / 1e-2) < 0.15

    def test_fixed_noise_bit_identical(self, rng):
        model = small_model(rng)
        z = rng.standard_normal((2, D))
        eps = rng.standard_normal((2, M))
        assert np.array_equal(model.decode_sample(z, eps), model.decode_sample(z, eps))


class TestLossMu:
    def test_perfect_reconstruction_unit_sigma(self, rng):
        model = small_model(rng)
        force_unit_sigma(model)
        x = rng.random((4, M))
        q = model.encode(x)
        eta = np.zeros((4, D))
        # make the decoder reproduce x exactly by spying on it
        with ad.no_grad():
            recon = model.decoder_mu(Tensor(q.mu)).data
        loss = gaussian_nll(Tensor(recon), model.decoder_mu(Tensor(q.mu)),
                            model.decoder_sigma.precision(Tensor(q.mu)))
        assert abs(float(loss.data) - M / 2 * LOG_2PI) < 1e-10
        del eta

    def test_quadratic_in_residual(self, rng):
        model = small_model(rng)
        force_unit_sigma(model)
        z = rng.standard_normal((1, D))
        with ad.no_grad():
            mu = model.decoder_mu(Tensor(z))
            beta = model.decoder_sigma.precision(Tensor(z))
        r = rng.standard_normal(M) * 0.5
        loss = gaussian_nll(Tensor(mu.data + r), mu, beta)
        expected = M / 2 * LOG_2PI + 0.5 * (r**2).sum()
        assert abs(float(loss.data) - expected) < 1e-10

    def test_monotone_in_residual_norm(self, rng):
        model = small_model(rng)
        force_unit_sigma(model)
        z = rng.standard_normal((1, D))
        with ad.no_grad():
            mu = model.decoder_mu(Tensor(z))
            beta = model.decoder_sigma.precision(Tensor(z))
        direction = rng.standard_normal(M)
        direction /= np.linalg.norm(direction)
        losses = [
            float(gaussian_nll(Tensor(mu.data + s * direction), mu, beta).data)
            for s in np.linspace(0.0, 3.0, 13)
        ]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_matches_scalar_loop_oracle(self, rng):
        model = small_model(rng)
        x = rng.random((3, M))
        eta = rng.standard_normal((3, D))
        loss = float(loss_mu(model, x, eta).data)

        q = model.encode(x)
        z = q.mu + q.sigma[:, None] * eta
        with ad.no_grad():
            mu = model.decoder_mu(Tensor(z)).data
            beta = model.decoder_sigma.precision(Tensor(z)).data
        total = 0.0
        for n in range(3):
            for m in range(M):
                sigma2 = 1.0 / beta[n, m]
                total += 0.5 * (
                    np.log(2 * np.pi) + np.log(sigma2) + (x[n, m] - mu[n, m]) ** 2 / sigma2
                )
        assert abs(loss - total / 3) < 1e-10

    def test_empty_batch_rejected(self, rng):
        with pytest.raises(ContractError):
            loss_mu(small_model(rng), np.empty((0, M)), np.empty((0, D)))


class TestKlBm:
    def test_zero_when_posterior_matches_prior(self, rng):
        model = small_model(rng)
        # curved decoder: keep default RBF sigma (non-constant)
        for z in rng.standard_normal((100, 1, D)):
            q = PosteriorParams(mu=np.tile(model.mu_prior.data, (1, 1)), sigma=np.ones(1))
            assert abs(kl_bm(model, z, q)) < 1e-9

    def test_constant_metric_closed_form(self, rng):
        model = small_model(rng)
        force_unit_sigma(model)
        # identity decoder mean: G == I everywhere
        model.decoder_mu.layers = model.decoder_mu.layers[:1]
        model.decoder_mu.layers[0].W.data = np.eye(D, M)
        model.decoder_mu.layers[0].b.data = np.zeros(M)
        model.decoder_mu.layers[0].activation = "linear"
        model.mu_prior.data = np.array([0.5, -0.5])
        mu_z = np.array([[1.0, 2.0]])
        sigma_z = np.array([0.7])
        z = mu_z.copy()  # evaluate at the posterior mean
        got = kl_bm(model, z, PosteriorParams(mu=mu_z, sigma=sigma_z))
        expected = (
            -D / 2 * np.log(sigma_z[0] ** 2)
            + 0.5 * ((mu_z[0] - model.mu_prior.data) ** 2).sum()
        )
        assert abs(got - expected) < 1e-9

    def test_matches_term_by_term_oracle(self, rng):
        from curvpriv.geometry import logdet_metric_batch, metric_batch

        model = small_model(rng)
        x = rng.random((4, M))
        q = model.encode(x)
        eta = rng.standard_normal((4, D))
        z = q.mu + q.sigma[:, None] * eta
        got = kl_bm(model, z, q)

        # direct evaluation of the two log-density expressions per sample
        dec = model.decoder
        prior = np.tile(model.mu_prior.data, (4, 1))
        total = 0.0
        for i in range(4):
            ld_z = logdet_metric_batch(dec, z[i : i + 1])[0]
            ld_post = logdet_metric_batch(dec, q.mu[i : i + 1])[0]
            ld_prior = logdet_metric_batch(dec, prior[i : i + 1])[0]
            G_mid_post, _ = metric_batch(dec, 0.5 * (z[i : i + 1] + q.mu[i : i + 1]))
            G_mid_prior, _ = metric_batch(dec, 0.5 * (z[i : i + 1] + prior[i : i + 1]))
            l2_post = (z[i] - q.mu[i]) @ G_mid_post[0] @ (z[i] - q.mu[i])
            l2_prior = (z[i] - prior[i]) @ G_mid_prior[0] @ (z[i] - prior[i])
            s2 = q.sigma[i] ** 2
            log_q = (
                -D / 2 * np.log(2 * np.pi * s2) + 0.5 * ld_z - 0.5 * ld_post
                - l2_post / (2 * s2)
            )
            log_p = (
                -D / 2 * np.log(2 * np.pi) + 0.5 * ld_z - 0.5 * ld_prior - l2_prior / 2
            )
            total += log_q - log_p
        assert abs(got - total / 4) < 1e-9

    def test_spline_distance_mode(self, rng):
        from curvpriv.geometry import GeodesicConfig

        model = small_model(rng)
        x = rng.random((2, M))
        q = model.encode(x)
        z = q.mu + 0.05 * rng.standard_normal((2, D))
        dist = spline_distance_sq(model, GeodesicConfig(max_iters=20))
        val = kl_bm(model, z, q, distance_sq=dist)
        assert np.isfinite(val)


class TestLossSigma:
    def test_zero_weight_equals_reconstruction(self, rng):
        model = small_model(rng, kl_weight=0.0)
        x = rng.random((3, M))
        eta = rng.standard_normal((3, D))
        assert float(loss_sigma(model, x, eta).data) == float(loss_mu(model, x, eta).data)

    def test_sum_of_oracles(self, rng):
        model = small_model(rng, kl_weight=1.0)
        x = rng.random((4, M))
        eta = rng.standard_normal((4, D))
        got = float(loss_sigma(model, x, eta).data)

        recon = float(loss_mu(model, x, eta).data)
        q = model.encode(x)
        z = q.mu + q.sigma[:, None] * eta
        kl = kl_bm(model, z, q)
        assert abs(got - (recon + kl)) < 1e-9


class TestGradientPartition:
    def test_mu_stage_leaves_sigma_parameters_untouched(self, rng):
        from curvpriv.nets import Adam

        model = small_model(rng)
        groups = model.param_groups("sigma")
        sigma_bytes = {
            k: v.data.tobytes()
            for k, v in model.parameters().items()
            if k.startswith("dec_sigma.") or k == "mu_prior" or k.startswith("enc.logsig.")
        }
        x = rng.random((6, M))
        eta = rng.standard_normal((6, D))
        loss = loss_mu(model, x, eta)
        grads = backward(loss)
        Adam(lr=1e-3).step(groups["mu"], {k: grads.get(id(p)) for k, p in groups["mu"].items()})
        for k, v in model.parameters().items():
            if k in sigma_bytes:
                assert v.data.tobytes() == sigma_bytes[k], k

    def test_sigma_stage_leaves_mu_parameters_untouched(self, rng):
        from curvpriv.nets import Adam

        model = small_model(rng)
        groups = model.param_groups("sigma")
        mu_bytes = {k: p.data.tobytes() for k, p in groups["mu"].items()}
        x = rng.random((6, M))
        eta = rng.standard_normal((6, D))
        loss = loss_sigma(model, x, eta)
        grads = backward(loss)
        Adam(lr=1e-3).step(groups["sigma"], {k: grads.get(id(p)) for k, p in groups["sigma"].items()})
        for k, p in groups["mu"].items():
            assert p.data.tobytes() == mu_bytes[k], k

    def test_sigma_stage_updates_sigma_parameters(self, rng):
        from curvpriv.nets import Adam

        model = small_model(rng)
        groups = model.param_groups("sigma")
        before = {k: p.data.copy() for k, p in groups["sigma"].items()}
        x = rng.random((6, M))
        eta = rng.standard_normal((6, D))
        grads = backward(loss_sigma(model, x, eta))
        Adam(lr=1e-3).step(groups["sigma"], {k: grads.get(id(p)) for k, p in groups["sigma"].items()})
        changed = [k for k, p in groups["sigma"].items() if not np.array_equal(p.data, before[k])]
        assert "dec_sigma.w_raw" in changed
        assert "mu_prior" in changed


class TestNormalization:
    def test_reconstructions_unchanged(self, rng):
        model = small_model(rng)
        x = rng.random((5, M))
        before = model.decode_sample(model.encode(x).mu, eps=None)
        s = normalize_latent_scale(model, model.encode(x).mu)
        after = model.decode_sample(model.encode(x).mu, eps=None)
        assert s > 0
        assert np.max(np.abs(before - after)) < 1e-9

    def test_unit_spread(self, rng):
        model = small_model(rng)
        x = rng.random((200, M))
        normalize_latent_scale(model, model.encode(x).mu)
        spread = model.encode(x).mu.std(axis=0).mean()
        assert abs(spread - 1.0) < 1e-6


class TestPretrainSeparation:
    def test_two_cluster_posteriors_separate(self, blob_data, trained_toy):
        ds, _ = blob_data
        q = trained_toy.model.encode(ds.flat)
        m0 = q.mu[ds.labels == 0].mean(axis=0)
        m1 = q.mu[ds.labels == 1].mean(axis=0)
        assert np.linalg.norm(m0 - m1) > 0.5
