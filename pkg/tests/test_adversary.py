import numpy as np
import pytest

from curvpriv import autodiff as ad
from curvpriv.adversary import Critic, gradient_penalty, loss_d, loss_g
from curvpriv.autodiff import Tensor, backward
from curvpriv.errors import DimensionError
from curvpriv.nets import Adam

M = 6


def make_constant_critic(rng, value=0.0):
    critic = Critic(M, rng, hidden=8)
    for layer in critic.body.layers:
        layer.W.data = np.zeros_like(layer.W.data)
        layer.b.data = np.zeros_like(layer.b.data)
    critic.body.layers[-1].b.data = np.array([value])
    return critic


def make_linear_critic(rng, w):
    critic = Critic(M, rng, hidden=8)
    critic.body.layers = critic.body.layers[:1]
    critic.body.layers[0].W.data = np.asarray(w, dtype=np.float64)[:, None]
    critic.body.layers[0].b.data = np.zeros(1)
    critic.body.layers[0].activation = "linear"
    return critic


class TestGradientPenalty:
    def test_constant_critic_gives_one(self, rng):
        critic = make_constant_critic(rng, value=3.0)
        real = rng.random((5, M))
        fake = rng.random((5, M))
        gp = gradient_penalty(critic, real, fake, np.random.default_rng(0))
        assert abs(float(gp.data) - 1.0) < 1e-12

    def test_unit_gradient_linear_critic_gives_zero(self, rng):
        w = np.zeros(M)
        w[0] = 1.0  # exactly unit norm
        critic = make_linear_critic(rng, w)
        gp = gradient_penalty(critic, rng.random((4, M)), rng.random((4, M)), np.random.default_rng(0))
        assert float(gp.data) < 1e-9

    def test_norm_three_gives_four(self, rng):
        w = np.zeros(M)
        w[1] = 3.0
        critic = make_linear_critic(rng, w)
        gp = gradient_penalty(critic, rng.random((4, M)), rng.random((4, M)), np.random.default_rng(0))
        assert abs(float(gp.data) - 4.0) < 1e-12

    def test_nonnegative(self, rng):
        critic = Critic(M, rng, hidden=8)
        for seed in range(5):
            gp = gradient_penalty(
                critic, rng.random((6, M)), rng.random((6, M)), np.random.default_rng(seed)
            )
            assert float(gp.data) >= 0.0

    def test_batch_size_mismatch(self, rng):
        critic = Critic(M, rng, hidden=8)
        with pytest.raises(DimensionError):
            gradient_penalty(critic, np.zeros((3, M)), np.zeros((4, M)), np.random.default_rng(0))


def critic_loss_oracle(critic, real, fake, u, lambda_gp):
    """Independent numpy re-implementation (loops, closed-form gradients)."""

    def forward(x):
        h = x
        for layer in critic.body.layers:
            pre = h @ layer.W.data + layer.b.data
            if layer.activation == "tanh":
                h = np.tanh(pre)
            elif layer.activation == "linear":
                h = pre
            else:
                raise AssertionError(layer.activation)
        return h[:, 0]

    def input_grad(x):
        pres, acts = [], []
        h = x
        for layer in critic.body.layers:
            pre = h @ layer.W.data + layer.b.data
            h = np.tanh(pre) if layer.activation == "tanh" else pre
            pres.append(pre)
            acts.append(h)
        delta = np.ones((len(x), 1))
        for i in reversed(range(len(critic.body.layers))):
            if critic.body.layers[i].activation == "tanh":
                delta = delta * (1 - acts[i] ** 2)
            delta = delta @ critic.body.layers[i].W.data.T
        return delta

    mixed = u * real + (1 - u) * fake
    norms = np.sqrt((input_grad(mixed) ** 2).sum(axis=1))
    gp = ((norms - 1) ** 2).mean()
    return forward(fake).mean() - forward(real).mean() + lambda_gp * gp


class TestLossD:
    def test_constant_critic_equals_lambda(self, rng):
        critic = make_constant_critic(rng, value=2.0)
        loss = loss_d(critic, rng.random((5, M)), rng.random((5, M)), np.random.default_rng(0))
        assert abs(float(loss.data) - critic.lambda_gp) < 1e-9

    def test_plus_minus_one_arithmetic(self, rng):
        # critic scoring +1 on fakes and -1 on reals gives 2 + lambda * GP
        critic = Critic(M, rng, hidden=8)
        real = rng.random((4, M))
        fake = rng.random((4, M))
        u = np.random.default_rng(0).uniform(size=(4, 1))
        gp_val = float(gradient_penalty(critic, real, fake, np.random.default_rng(0)).data)

        class Scorer:
            lambda_gp = critic.lambda_gp
            body = critic.body

            def score(self, x):
                fakes = np.allclose(x.data, fake)
                return Tensor(np.full((len(x.data), 1), 1.0 if fakes else -1.0))

        loss = loss_d(Scorer(), real, fake, np.random.default_rng(0))
        assert abs(float(loss.data) - (2.0 + critic.lambda_gp * gp_val)) < 1e-9
        del u

    def test_matches_independent_oracle(self, rng):
        critic = Critic(M, rng, hidden=8)
        real = rng.random((7, M))
        fake = rng.random((7, M))
        got = float(loss_d(critic, real, fake, np.random.default_rng(5)).data)
        u = np.random.default_rng(5).uniform(size=(7, 1))
        want = critic_loss_oracle(critic, real, fake, u, critic.lambda_gp)
        assert abs(got - want) < 1e-10

    def test_identical_batches_zero_gradient_critic(self, rng):
        critic = make_constant_critic(rng)
        batch = rng.random((6, M))
        loss = loss_d(critic, batch, batch.copy(), np.random.default_rng(0))
        assert abs(float(loss.data) - critic.lambda_gp) < 1e-12


class TestLossG:
    def test_constant_critic(self, rng):
        critic = make_constant_critic(rng, value=1.5)
        loss = loss_g(critic, Tensor(rng.random((3, M))))
        assert abs(float(loss.data) + 1.5) < 1e-12

    def test_single_sample(self, rng):
        w = np.zeros(M)
        w[0] = 1.0
        critic = make_linear_critic(rng, w)
        x = np.zeros((1, M))
        x[0, 0] = 2.5
        assert abs(float(loss_g(critic, Tensor(x)).data) + 2.5) < 1e-12

    def test_mean_of_scores(self, rng):
        w = np.zeros(M)
        w[0] = 1.0
        critic = make_linear_critic(rng, w)
        x = np.zeros((3, M))
        x[:, 0] = [1.0, 2.0, 3.0]
        assert abs(float(loss_g(critic, Tensor(x)).data) + 2.0) < 1e-12


class TestParameterIsolation:
    def test_critic_step_leaves_generator_untouched(self, rng, trained_toy):
        model = trained_toy.model
        critic = Critic(model.data_dim, rng, hidden=8)
        dec_bytes = {k: p.data.tobytes() for k, p in model.decoder_parameters().items()}
        real = rng.random((8, model.data_dim))
        fake = model.decode_sample(rng.standard_normal((8, model.latent_dim)))
        loss = loss_d(critic, real, fake, np.random.default_rng(0))
        grads = backward(loss)
        params = critic.parameters()
        Adam(lr=1e-3).step(params, {k: grads.get(id(p)) for k, p in params.items()})
        for k, p in model.decoder_parameters().items():
            assert p.data.tobytes() == dec_bytes[k]

    def test_generator_step_leaves_critic_untouched(self, rng, trained_toy):
        model = trained_toy.model
        critic = Critic(model.data_dim, rng, hidden=8)
        critic_bytes = {k: p.data.tobytes() for k, p in critic.parameters().items()}
        z = Tensor(rng.standard_normal((8, model.latent_dim)))
        fake_t = model.decoder_mu(z)
        loss = loss_g(critic, fake_t)
        grads = backward(loss)
        params = model.decoder_parameters()
        Adam(lr=1e-3).step(params, {k: grads.get(id(p)) for k, p in params.items()})
        for k, p in critic.parameters().items():
            assert p.data.tobytes() == critic_bytes[k]

    def test_gp_gradients_train_the_critic(self, rng):
        # the closed-form input-gradient expression must carry parameter grads
        critic = Critic(M, rng, hidden=8)
        gp = gradient_penalty(critic, rng.random((6, M)), rng.random((6, M)), np.random.default_rng(0))
        grads = backward(gp)
        w0 = critic.body.layers[0].W
        assert id(w0) in grads
        assert np.abs(grads[id(w0)]).max() > 0
