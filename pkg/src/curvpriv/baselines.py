"""Classical privacy baselines: pixelation, Gaussian blur, k-anonymity.

All three are deterministic given the seed and produce output in the same
published-dataset format as the geodesic pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import LabeledDataset
from .errors import ContractError
from .nets import kmeans
from .obfuscator import PublishedDataset


@dataclass
class BaselineConfig:
    block: int = 3
    radius: float = 1.5
    k: int = 10
    clusters: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.block < 1:
            raise ContractError("pixelation block must be >= 1")
        if self.radius <= 0:
            raise ContractError("blur radius must be > 0")
        if self.k < 1 or self.clusters < 1:
            raise ContractError("k and cluster count must be >= 1")


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile by its mean; partial edge tiles are
    averaged over their actual extent."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = np.empty_like(img)
    for i in range(0, h, block):
        for j in range(0, w, block):
            tile = img[i : i + block, j : j + block]
            out[i : i + block, j : j + block] = tile.mean()
    return out


def gaussian_kernel(radius: float) -> np.ndarray:
    """Normalized 1-D Gaussian with std = radius, truncated at ceil(3*radius)."""
    half = int(np.ceil(3.0 * radius))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / radius) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur with reflective (symmetric) borders."""
    if radius <= 0:
        raise ContractError("blur radius must be > 0")
    img = np.asarray(img, dtype=np.float64)
    kernel = gaussian_kernel(radius)
    half = (len(kernel) - 1) // 2
    padded = np.pad(img, ((half, half), (0, 0)), mode="symmetric")
    rows = np.empty_like(img)
    for i in range(img.shape[0]):
        rows[i] = kernel @ padded[i : i + len(kernel), :]
    padded = np.pad(rows, ((0, 0), (half, half)), mode="symmetric")
    out = np.empty_like(img)
    for j in range(img.shape[1]):
        out[:, j] = padded[:, j : j + len(kernel)] @ kernel
    return out


def k_anonymize(ds: LabeledDataset, k: int, clusters: int, seed: int) -> LabeledDataset:
    """Cluster-based k-anonymity.

    Images are k-means clustered; every member of a cluster with at least k
    samples is replaced by the cluster's member closest to the center (image
    and label both), and clusters smaller than k are suppressed.
    """
    if len(ds) < clusters:
        raise ContractError(f"dataset of {len(ds)} smaller than {clusters} clusters")
    rng = np.random.Generator(np.random.Philox(key=seed))
    X = ds.flat
    centers, assign, _ = kmeans(X, clusters, rng)
    keep_idx = []
    rep_for_cluster = {}
    for c in range(clusters):
        members = np.flatnonzero(assign == c)
        if len(members) < k:
            continue  # suppressed
        d2 = ((X[members] - centers[c]) ** 2).sum(axis=1)
        rep_for_cluster[c] = members[int(np.argmin(d2))]
        keep_idx.extend(members.tolist())
    keep_idx = np.asarray(sorted(keep_idx), dtype=np.intp)
    images = np.stack([ds.images[rep_for_cluster[assign[i]]] for i in keep_idx])
    labels = np.asarray([ds.labels[rep_for_cluster[assign[i]]] for i in keep_idx])
    out = LabeledDataset(images, labels, ds.split, dict(ds.notes))
    out.notes["k_anonymity"] = {
        "k": k,
        "clusters": clusters,
        "suppressed": int(len(ds) - len(keep_idx)),
    }
    return out


def run_baseline(ds: LabeledDataset, method: str, cfg: BaselineConfig) -> PublishedDataset:
    """Apply one baseline to a dataset, in the published-dataset format."""
    cfg.validate()
    if method == "pixelate":
        images = np.stack([pixelate(im, cfg.block) for im in ds.images])
        labels = ds.labels.copy()
    elif method == "blur":
        images = np.stack([np.clip(gaussian_blur(im, cfg.radius), 0.0, 1.0) for im in ds.images])
        labels = ds.labels.copy()
    elif method == "kanon":
        anon = k_anonymize(ds, cfg.k, cfg.clusters, cfg.seed)
        images, labels = anon.images, anon.labels
    else:
        raise ContractError(f"unknown baseline method {method!r}")
    manifest = [
        {"index": i, "label": int(labels[i]), "method": method} for i in range(len(labels))
    ]
    return PublishedDataset(
        images=images,
        labels=labels,
        manifest=manifest,
        provenance={"method": method, "config": vars(cfg)},
    )
