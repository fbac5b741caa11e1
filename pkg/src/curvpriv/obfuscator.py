"""Curvature-guided geodesic perturbation.

A small regression network learns to predict the finite-difference
curvature of the current decoder, so perturbation-time queries avoid
repeated metric computations. Each sample's latent is moved along the
energy-minimizing geodesic toward its most activated RBF center, stopping
at the lowest-estimated-curvature sample point that precedes the highest
one; never crossing the peak is what keeps labels intact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ContractError, DataError, ObfuscationError
from .nets import Adam, Mlp
from .rvae import RvaeModel

PUBLISH_CHUNK = 64


class CurvatureEstimator:
    """MLP regressor latent -> nonnegative curvature estimate (softplus head)."""

    def __init__(self, latent_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.body = Mlp(
            [latent_dim, hidden, hidden, 1],
            ["tanh", "tanh", "softplus"],
            rng,
        )

    def parameters(self, prefix: str = "est.") -> dict[str, Tensor]:
        return self.body.parameters(prefix)

    def predict_taped(self, z: Tensor) -> Tensor:
        return self.body(z)

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        with ad.no_grad():
            out = self.body(Tensor(z))
        return out.data[:, 0]


@dataclass
class PerturbationOutcome:
    original: np.ndarray
    endpoint_index: int
    path: geometry.GeodesicPath
    i_max: int
    i_star: int
    perturbed: np.ndarray


@dataclass
class PublishedDataset:
    images: np.ndarray  # [N, H, W] in [0, 1]
    labels: np.ndarray
    manifest: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def posterior_jitter_sampler(
    model: RvaeModel,
    images_flat: np.ndarray,
    rng: np.random.Generator,
    n_samples: int,
    jitter: float = 0.1,
):
    """Latent sampler for estimator training: posterior means plus Gaussian
    jitter, covering the domain the perturbation will visit."""

    def sample() -> np.ndarray:
        idx = rng.integers(0, len(images_flat), size=n_samples)
        mu = model.encode(images_flat[idx]).mu
        return mu + jitter * rng.standard_normal(mu.shape)

    return sample


def train_estimator(
    est: CurvatureEstimator,
    decoder,
    latent_sampler,
    epochs: int,
    lr: float,
    fd_eps: float = 1e-3,
    opt: Adam | None = None,
    batch_size: int = 64,
) -> list[float]:
    """Fit the estimator to finite-difference curvature targets.

    Each epoch draws a fresh latent set from the sampler, computes targets
    against the frozen decoder, and runs minibatch MSE steps. Returns the
    per-epoch mean squared error (final entry is the reported training MSE).
    """
    opt = opt or Adam(lr=lr)
    params = est.parameters()
    history = []
    for _ in range(epochs):
        latents = np.asarray(latent_sampler(), dtype=np.float64)
        targets = geometry.curvature_fd_batch(decoder, latents, eps=fd_eps)
        if not np.all(np.isfinite(targets)):
            bad = latents[~np.isfinite(targets)][0]
            raise DataError(f"non-finite curvature target at z={bad.tolist()}")
        epoch_losses = []
        for lo in range(0, len(latents), batch_size):
            sel = slice(lo, lo + batch_size)
            pred = est.predict_taped(Tensor(latents[sel]))
            loss = ad.tmean(ad.square(pred - Tensor(targets[sel, None])))
            grads = ad.backward(loss)
            opt.step(params, {k: grads.get(id(p)) for k, p in params.items()})
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
    return history


def estimator_loss(est: CurvatureEstimator, latents: np.ndarray, targets: np.ndarray) -> float:
    with ad.no_grad():
        pred = est.body(Tensor(np.atleast_2d(latents)))
        return float(np.mean((pred.data[:, 0] - np.asarray(targets)) ** 2))


def select_endpoint(model: RvaeModel, z: np.ndarray) -> int:
    """Index of the RBF center with the largest kernel activation at z.

    Ties break toward the lowest index (argmax of the activation vector).
    """
    net = model.decoder_sigma
    if net.centers.shape[0] < 1:
        raise ContractError("RBF network has no centers")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        acts = net.kernel(Tensor(z)).data[0]
    return int(np.argmax(acts))


def prefix_argmin(khat: np.ndarray) -> tuple[int, int]:
    """(i_max, i_star): first index of the highest estimate, then the first
    index of the lowest estimate among positions 0..i_max."""
    khat = np.asarray(khat, dtype=np.float64)
    i_max = int(np.argmax(khat))
    i_star = int(np.argmin(khat[: i_max + 1]))
    return i_max, i_star


def perturb(
    model: RvaeModel,
    est: CurvatureEstimator,
    z: np.ndarray,
    geo_cfg: geometry.GeodesicConfig | None = None,
) -> PerturbationOutcome:
    """Move one latent along its geodesic to the pre-peak curvature minimum."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    endpoint = select_endpoint(model, z)
    center = model.decoder_sigma.centers.data[endpoint]
    path = geometry.geodesic(model.decoder, z, center, geo_cfg)
    khat = est.predict(path.samples)
    if not np.all(np.isfinite(khat)):
        raise ObfuscationError(f"non-finite curvature estimate along path from z={z.tolist()}")
    path.curvature = khat
    i_max, i_star = prefix_argmin(khat)
    return PerturbationOutcome(
        original=z,
        endpoint_index=endpoint,
        path=path,
        i_max=i_max,
        i_star=i_star,
        perturbed=path.samples[i_star].copy(),
    )


def perturb_batch(
    model: RvaeModel,
    est: CurvatureEstimator,
    Z: np.ndarray,
    geo_cfg: geometry.GeodesicConfig | None = None,
):
    """Vectorized perturbation of a latent batch; returns (z_perturbed, rows)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    net = model.decoder_sigma
    with ad.no_grad():
        acts = net.kernel(Tensor(Z)).data
    endpoints = acts.argmax(axis=1)
    centers = net.centers.data[endpoints]
    paths = geometry.geodesic_batch(model.decoder, Z, centers, geo_cfg)
    z_out = np.empty_like(Z)
    rows = []
    for i, path in enumerate(paths):
        khat = est.predict(path.samples)
        if not np.all(np.isfinite(khat)):
            raise ObfuscationError(f"non-finite curvature estimate for sample {i}")
        path.curvature = khat
        i_max, i_star = prefix_argmin(khat)
        z_out[i] = path.samples[i_star]
        rows.append(
            {
                "endpoint": int(endpoints[i]),
                "i_max": i_max,
                "i_star": i_star,
                "khat_start": float(khat[0]),
                "khat_chosen": float(khat[i_star]),
                "khat_path": [float(v) for v in khat],
            }
        )
    return z_out, rows


def publish(
    model: RvaeModel,
    est: CurvatureEstimator,
    images: np.ndarray,
    labels: np.ndarray,
    geo_cfg: geometry.GeodesicConfig | None = None,
    chunk: int = PUBLISH_CHUNK,
    provenance: dict | None = None,
) -> PublishedDataset:
    """Full-dataset pass: encode, perturb, decode noiselessly, clamp.

    Labels carry over unchanged; the manifest records the perturbation
    metadata per sample. Deterministic for a fixed checkpoint.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    h, w = images.shape[1], images.shape[2]
    flat = images.reshape(n, h * w)
    out = np.empty_like(flat)
    manifest: list[dict] = []
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        try:
            mu_z = model.encode(flat[lo:hi]).mu
            z_pert, rows = perturb_batch(model, est, mu_z, geo_cfg)
            decoded = model.decode_sample(z_pert, eps=None)
        except Exception as exc:
            raise ObfuscationError(f"publish failed in samples [{lo}, {hi}): {exc}") from exc
        out[lo:hi] = np.clip(decoded, 0.0, 1.0)
        for j, row in enumerate(rows):
            row = dict(row)
            row["index"] = lo + j
            row["label"] = int(labels[lo + j])
            manifest.append(row)
    return PublishedDataset(
        images=out.reshape(n, h, w),
        labels=np.asarray(labels).copy(),
        manifest=manifest,
        provenance=provenance or {},
    )
