"""curvpriv: curvature-guided geodesic obfuscation for private data release.

A Riemannian VAE learns the data manifold; extrinsic curvature of the
pullback metric flags membership-inference-vulnerable samples; those are
moved along energy-minimizing geodesics toward low-curvature regions under
an alternating utility/privacy training scheme; the released dataset is
scored with a loss-based membership-inference attack and utility metrics.
"""

from . import adversary, baselines, dataio, evaluation, geometry, obfuscator, rvae
from .autodiff import Tensor, backward, jacobian, jvp, no_grad
from .dataio import LabeledDataset, load_idx, save_idx, synth_manifold
from .geometry import (
    GeodesicConfig,
    GeodesicPath,
    MetricTensor,
    curvature_fd,
    curve_energy,
    geodesic,
    geodesic_length,
    pullback_metric,
)
from .nets import Adam, Mlp, RbfNet, kmeans
from .obfuscator import CurvatureEstimator, PublishedDataset, perturb, publish
from .rng import StreamHub
from .rvae import PosteriorParams, RvaeModel, kl_bm, loss_mu, loss_sigma
from .training import PhaseLog, TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CurvatureEstimator",
    "GeodesicConfig",
    "GeodesicPath",
    "LabeledDataset",
    "MetricTensor",
    "Mlp",
    "PhaseLog",
    "PosteriorParams",
    "PublishedDataset",
    "RbfNet",
    "RvaeModel",
    "StreamHub",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "adversary",
    "backward",
    "baselines",
    "curvature_fd",
    "curve_energy",
    "dataio",
    "evaluation",
    "geodesic",
    "geodesic_length",
    "geometry",
    "jacobian",
    "jvp",
    "kl_bm",
    "kmeans",
    "load_idx",
    "loss_mu",
    "loss_sigma",
    "no_grad",
    "obfuscator",
    "perturb",
    "publish",
    "pullback_metric",
    "rvae",
    "save_idx",
    "synth_manifold",
]
