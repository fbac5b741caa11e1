"""Wasserstein critic with gradient penalty.

The penalty needs the critic's gradient w.r.t. interpolated inputs; that
gradient is written out in closed form from the MLP structure (taped
primitives), so minimizing the penalty w.r.t. the critic parameters stays a
first-order problem.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, TrainingError
from .nets import Mlp


class Critic:
    """Scalar-score network on flattened images, plus the penalty weight."""

    def __init__(
        self,
        data_dim: int,
        rng: np.random.Generator,
        hidden: int = 64,
        lambda_gp: float = 10.0,
    ):
        self.body = Mlp([data_dim, hidden, hidden, 1], ["tanh", "tanh", "linear"], rng)
        self.lambda_gp = float(lambda_gp)

    def parameters(self, prefix: str = "critic.") -> dict[str, Tensor]:
        return self.body.parameters(prefix)

    def score(self, x: Tensor) -> Tensor:
        return self.body(x)


def gradient_penalty(
    critic: Critic, real: np.ndarray, fake: np.ndarray, rng: np.random.Generator
) -> Tensor:
    """mean((|grad_x D(x_tilde)|_2 - 1)^2) on per-pair uniform interpolates."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    if real.shape != fake.shape:
        raise DimensionError(f"real batch {real.shape} != fake batch {fake.shape}")
    u = rng.uniform(size=(real.shape[0], 1))
    mixed = Tensor(u * real + (1.0 - u) * fake)
    grad = critic.body.input_gradient(mixed)
    norms = ad.sqrt(ad.tsum(ad.square(grad), axis=1))
    return ad.tmean(ad.square(norms - Tensor(1.0)))


def loss_d(
    critic: Critic, real: np.ndarray, fake: np.ndarray, rng: np.random.Generator
) -> Tensor:
    """E[D(fake)] - E[D(real)] + lambda * GP."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    score_fake = ad.tmean(critic.score(Tensor(fake)))
    score_real = ad.tmean(critic.score(Tensor(real)))
    gp = gradient_penalty(critic, real, fake, rng)
    loss = score_fake - score_real + Tensor(critic.lambda_gp) * gp
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite critic loss")
    return loss


def loss_g(critic: Critic, fake: Tensor) -> Tensor:
    """Negative mean critic score of generated samples (taped through the
    generator; the critic's own update owns its parameters)."""
    return -ad.tmean(critic.score(fake))
