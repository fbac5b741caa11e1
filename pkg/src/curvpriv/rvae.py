"""Riemannian VAE backbone.

Encoder trunk with separate posterior-mean and posterior-scale heads,
MLP decoder mean, RBF decoder standard deviation, learned prior mean.
Sampling follows x = mu(z) + sigma(z) * eps with eps ~ N(0, I). The KL term
is the Brownian-motion form: the log|det G(z)| contributions of posterior
and prior cancel, leaving determinant terms at the posterior/prior means
and squared manifold distances. Squared distances default to the linearized
quadratic form through the metric at the midpoint; exact spline geodesic
lengths are available for verification runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ContractError, TrainingError
from .nets import Dense, Mlp, RbfNet

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PosteriorParams:
    """Per-sample posterior mean [N, d] and isotropic scale [N] (> 0)."""

    mu: np.ndarray
    sigma: np.ndarray


class _DecoderView:
    """Adapter exposing the decoder pair to the geometry module."""

    def __init__(self, model: "RvaeModel"):
        self._model = model

    def mu(self, z: Tensor) -> Tensor:
        return self._model.decoder_mu(z)

    def sigma(self, z: Tensor) -> Tensor:
        return self._model.decoder_sigma.sigma(z)


class RvaeModel:
    def __init__(
        self,
        data_dim: int,
        latent_dim: int,
        hidden: int,
        n_centers: int,
        rng: np.random.Generator,
        sigma_floor: float = 1e-6,
        kl_weight: float = 1.0,
        shared_rbf_weights: bool = False,
    ):
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.kl_weight = float(kl_weight)
        self.trunk = Mlp([data_dim, hidden, hidden], ["tanh", "tanh"], rng)
        self.head_mu = Dense(hidden, latent_dim, "linear", rng)
        self.head_logsig = Dense(hidden, 1, "linear", rng)
        self.decoder_mu = Mlp([latent_dim, hidden, hidden, data_dim], ["tanh", "tanh", "linear"], rng)
        self.decoder_sigma = RbfNet(
            latent_dim, data_dim, n_centers, rng,
            floor=sigma_floor, shared_weights=shared_rbf_weights,
        )
        self.mu_prior = Tensor(np.zeros(latent_dim), requires_grad=True)

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.trunk.parameters("enc.trunk."))
        out["enc.mu.W"] = self.head_mu.W
        out["enc.mu.b"] = self.head_mu.b
        out["enc.logsig.W"] = self.head_logsig.W
        out["enc.logsig.b"] = self.head_logsig.b
        out.update(self.decoder_mu.parameters("dec_mu."))
        out.update(self.decoder_sigma.parameters("dec_sigma."))
        out["mu_prior"] = self.mu_prior
        return out

    def param_groups(self, posterior_scale_stage: str = "sigma") -> dict[str, dict[str, Tensor]]:
        """Stage-wise parameter partition for the two-stage pre-training."""
        if posterior_scale_stage not in ("mu", "sigma"):
            raise ContractError("posterior_scale_stage must be 'mu' or 'sigma'")
        params = self.parameters()
        logsig = {k: v for k, v in params.items() if k.startswith("enc.logsig.")}
        mu_group = {
            k: v
            for k, v in params.items()
            if k.startswith(("enc.trunk.", "enc.mu.", "dec_mu."))
        }
        sigma_group = {
            k: v for k, v in params.items() if k.startswith("dec_sigma.") or k == "mu_prior"
        }
        if posterior_scale_stage == "mu":
            mu_group.update(logsig)
        else:
            sigma_group.update(logsig)
        return {"mu": mu_group, "sigma": sigma_group}

    def decoder_parameters(self) -> dict[str, Tensor]:
        params = self.parameters()
        return {k: v for k, v in params.items() if k.startswith(("dec_mu.", "dec_sigma."))}

    @property
    def decoder(self) -> _DecoderView:
        return _DecoderView(self)

    # -- forward paths --------------------------------------------------------

    def encode_taped(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior mean [N, d] and log-scale [N, 1], taped."""
        h = self.trunk(x)
        return self.head_mu(h), self.head_logsig(h)

    def encode(self, x: np.ndarray) -> PosteriorParams:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            mu, logsig = self.encode_taped(Tensor(x))
        if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logsig.data))):
            raise TrainingError("encoder produced non-finite posterior parameters")
        return PosteriorParams(mu=mu.data, sigma=np.exp(logsig.data[:, 0]))

    def decode_sample(self, z: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
        """x_hat = mu(z) + sigma(z) * eps; eps=None means noiseless mean."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        with ad.no_grad():
            mu = self.decoder_mu(Tensor(z)).data
            if eps is None:
                return mu
            sig = self.decoder_sigma.sigma(Tensor(z)).data
        return mu + sig * np.asarray(eps, dtype=np.float64)


def gaussian_nll(x: Tensor, mu: Tensor, beta_prec: Tensor) -> Tensor:
    """Mean over the batch of -log N(x; mu, diag(1/beta)) summed over channels."""
    resid = ad.square(x - mu)
    per_channel = Tensor(LOG_2PI) - ad.log(beta_prec) + resid * beta_prec
    return 0.5 * ad.tmean(ad.tsum(per_channel, axis=1))


def reparameterize(mu_z: Tensor, logsig: Tensor, eta: np.ndarray) -> Tensor:
    return mu_z + ad.exp(logsig) * Tensor(eta)


def loss_mu(model: RvaeModel, batch: np.ndarray, eta: np.ndarray) -> Tensor:
    """Reconstruction negative log-likelihood (the mu-stage objective)."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    xt = Tensor(np.asarray(batch, dtype=np.float64))
    mu_z, logsig = model.encode_taped(xt)
    z = reparameterize(mu_z, logsig, eta)
    recon = model.decoder_mu(z)
    beta_prec = model.decoder_sigma.precision(z)
    loss = gaussian_nll(xt, recon, beta_prec)
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite mu-stage loss")
    return loss


def _quadratic_form(diff: Tensor, G_vals: np.ndarray) -> Tensor:
    """diff^T G diff per row, with G held constant; shapes [N,d], [N,d,d] -> [N]."""
    n, d = diff.shape
    left = ad.reshape(diff, (n, d, 1))
    right = ad.reshape(diff, (n, 1, d))
    return ad.tsum(left * Tensor(G_vals) * right, axis=(1, 2))


def kl_bm_taped(
    model: RvaeModel,
    z: Tensor,
    mu_z: Tensor,
    logsig: Tensor,
    distance_sq=None,
) -> Tensor:
    """Per-sample Brownian-motion KL, mean over the batch (taped).

    Metric tensors are evaluated at the current parameters and then held
    constant inside the expression; gradients flow through the posterior
    scale, the reparameterized sample and the prior mean. ``distance_sq``
    overrides the squared-distance computation (callable (a, b) -> [N]);
    when given, those distances enter as constants (verification mode).
    """
    decoder = model.decoder
    d = model.latent_dim
    z_v = z.data
    mu_v = mu_z.data
    prior_v = model.mu_prior.data[None, :].repeat(len(z_v), axis=0)

    logdet_post = geometry.logdet_metric_batch(decoder, mu_v)
    logdet_prior = geometry.logdet_metric_batch(decoder, prior_v)
    term_scale = -float(d) * ad.reshape(logsig, (-1,))
    term_det = Tensor(0.5 * (logdet_prior - logdet_post))

    if distance_sq is not None:
        l2_post = Tensor(np.asarray(distance_sq(z_v, mu_v), dtype=np.float64))
        l2_prior = Tensor(np.asarray(distance_sq(z_v, prior_v), dtype=np.float64))
        term_post = -0.5 * ad.exp(-2.0 * ad.reshape(logsig, (-1,))) * l2_post
        term_prior = 0.5 * l2_prior
    else:
        G_post, _ = geometry.metric_batch(decoder, 0.5 * (z_v + mu_v))
        G_prior, _ = geometry.metric_batch(decoder, 0.5 * (z_v + prior_v))
        diff_post = z - mu_z
        diff_prior = z - model.mu_prior
        term_post = (
            -0.5
            * ad.exp(-2.0 * ad.reshape(logsig, (-1,)))
            * _quadratic_form(diff_post, G_post)
        )
        term_prior = 0.5 * _quadratic_form(diff_prior, G_prior)

    return ad.tmean(term_scale + term_det + term_post + term_prior)


def kl_bm(
    model: RvaeModel,
    z: np.ndarray,
    q: PosteriorParams,
    distance_sq=None,
) -> float:
    """Evaluation-mode KL for given latents and posterior parameters."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    logsig = np.log(np.asarray(q.sigma, dtype=np.float64)).reshape(-1, 1)
    with ad.no_grad():
        val = kl_bm_taped(model, Tensor(z), Tensor(q.mu), Tensor(logsig), distance_sq)
    return float(val.data)


def spline_distance_sq(model: RvaeModel, cfg: geometry.GeodesicConfig | None = None):
    """Squared-distance callable using full spline geodesic lengths."""

    def dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        paths = geometry.geodesic_batch(model.decoder, a, b, cfg)
        samples = np.stack([p.samples for p in paths], axis=1)
        return geometry.path_lengths(model.decoder, samples) ** 2

    return dist


def loss_sigma(
    model: RvaeModel,
    batch: np.ndarray,
    eta: np.ndarray,
    distance_sq=None,
) -> Tensor:
    """Reconstruction term plus kl_weight times the Brownian-motion KL."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    xt = Tensor(np.asarray(batch, dtype=np.float64))
    mu_z, logsig = model.encode_taped(xt)
    z = reparameterize(mu_z, logsig, eta)
    recon = model.decoder_mu(z)
    beta_prec = model.decoder_sigma.precision(z)
    loss = gaussian_nll(xt, recon, beta_prec)
    if model.kl_weight != 0.0:
        loss = loss + Tensor(model.kl_weight) * kl_bm_taped(model, z, mu_z, logsig, distance_sq)
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite sigma-stage loss")
    return loss


def normalize_latent_scale(model: RvaeModel, latents: np.ndarray) -> float:
    """Rescale the latent space to unit spread; the model is unchanged as a
    function of the data.

    Multiplies the posterior-mean head by s = 1/std(latents), shifts the
    posterior log-scale by log s, and divides the decoder first-layer
    weights by s. Reconstructions are mathematically identical while
    latents land at O(1), which keeps jitter sizes, finite-difference steps
    and kernel bandwidths on one common scale. Returns s.
    """
    spread = float(np.asarray(latents).std(axis=0).mean())
    s = 1.0 / max(spread, 1e-9)
    model.head_mu.W.data = model.head_mu.W.data * s
    model.head_mu.b.data = model.head_mu.b.data * s
    model.head_logsig.b.data = model.head_logsig.b.data + np.log(s)
    first = model.decoder_mu.layers[0]
    first.W.data = first.W.data / s
    return s


def init_rbf_from_latents(
    model: RvaeModel,
    latents: np.ndarray,
    rng: np.random.Generator,
    images: np.ndarray | None = None,
) -> None:
    """Place RBF centers by k-means on encoded latents.

    Bandwidths come from cluster spreads, the prior mean from the latent
    centroid, and (when training images are given) the precision weights are
    matched to the current reconstruction residuals so the sigma stage
    starts near its optimum instead of swinging the precision by orders of
    magnitude."""
    from .nets import _inv_softplus, kmeans, kmeans_bandwidths

    k = model.decoder_sigma.centers.shape[0]
    centers, assign, _ = kmeans(latents, k, rng)
    gammas = kmeans_bandwidths(latents, centers, assign)
    model.decoder_sigma.centers.data = centers
    model.decoder_sigma.log_bw.data = np.log(gammas)
    model.mu_prior.data = latents.mean(axis=0)
    if images is not None:
        recon = model.decode_sample(latents, eps=None)
        resid_var = float(np.mean((np.asarray(images) - recon) ** 2))
        beta_target = 1.0 / max(resid_var, 1e-4)
        w0 = max(beta_target - model.decoder_sigma.floor, 1e-3)
        model.decoder_sigma.w_raw.data = np.full_like(
            model.decoder_sigma.w_raw.data, _inv_softplus(w0)
        )
