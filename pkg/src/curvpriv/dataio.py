"""Dataset ingestion, class-imbalance processing and synthetic fixtures.

IDX files follow the MNIST container layout exactly: big-endian magic
(0x00000803 for image tensors, 0x00000801 for label vectors), big-endian
dimension sizes, unsigned-byte payload. Pixel bytes map to [0, 1] by /255.

The synthetic manifolds come with their exact decoder maps (built from
taped primitives), so metric and curvature values can be checked against
closed forms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def flat(self) -> np.ndarray:
        n = len(self.images)
        return self.images.reshape(n, -1)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, dict(self.notes))


# -- IDX container ------------------------------------------------------------


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated {what} at byte offset {f.tell() - len(buf)}")
    return buf


def load_idx(image_path: str, label_path: str) -> LabeledDataset:
    """Parse an IDX image/label file pair into a dataset in [0, 1]."""
    with open(image_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "image magic"))[0]
        if magic != IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} at byte offset 0 (want 0x{IMAGE_MAGIC:08x})"
            )
        n, h, w = struct.unpack(">III", _read_exact(f, 12, "image dimensions"))
        payload = _read_exact(f, n * h * w, "image payload")
        if f.read(1):
            raise FormatError(f"trailing bytes after image payload at offset {4 + 12 + n * h * w}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w) / 255.0

    with open(label_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "label magic"))[0]
        if magic != LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} at byte offset 0 (want 0x{LABEL_MAGIC:08x})"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "label count"))
        labels = np.frombuffer(_read_exact(f, n_labels, "label payload"), dtype=np.uint8)
    if n_labels != n:
        raise FormatError(f"count mismatch: {n} images vs {n_labels} labels")
    return LabeledDataset(images=images, labels=labels.astype(np.int64))


def save_idx(ds: LabeledDataset, image_path: str, label_path: str) -> None:
    """Write the dataset as an IDX pair (pixels quantized to bytes)."""
    n, h, w = ds.images.shape
    pixels = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# -- class-imbalance processing ----------------------------------------------


def imbalance_downsample(
    ds: LabeledDataset,
    tail_classes,
    fraction: float,
    rng: np.random.Generator,
) -> LabeledDataset:
    """Down-sample each tail class to ceil(fraction * head-class size).

    Head classes (everything not listed) are untouched; the head size is the
    largest head-class count. Sampling is without replacement and the kept
    indices stay in their original order.
    """
    if not (0.0 < fraction <= 1.0):
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    tail_classes = sorted(set(int(c) for c in tail_classes))
    labels = ds.labels
    present = set(np.unique(labels).tolist())
    for c in tail_classes:
        if c not in present:
            raise ContractError(f"tail class {c} absent from dataset")
    head_counts = [
        int((labels == c).sum()) for c in sorted(present) if c not in tail_classes
    ]
    if not head_counts:
        raise ContractError("no head classes left after removing tail classes")
    target = int(np.ceil(fraction * max(head_counts)))
    keep = np.ones(len(ds), dtype=bool)
    for c in tail_classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) > target:
            chosen = rng.choice(idx, size=target, replace=False)
            keep[idx] = False
            keep[chosen] = True
    out = ds.subset(np.flatnonzero(keep))
    out.notes = dict(ds.notes)
    out.notes["downsampled"] = {"tail_classes": tail_classes, "fraction": fraction}
    return out


# -- synthetic manifolds -------------------------------------------------------


class _ConstantSigma:
    """Mixin giving fixtures a constant decoder standard deviation."""

    sigma_value = 0.1

    def sigma(self, z: Tensor) -> Tensor:
        return Tensor(np.full((z.shape[0], self.data_dim), self.sigma_value))


class PlaneDecoder(_ConstantSigma):
    """Affine embedding z -> z A + b; flat pullback metric A^T A."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.latent_dim, self.data_dim = self.A.shape

    def mu(self, z: Tensor) -> Tensor:
        return ad.matmul(z, Tensor(self.A)) + Tensor(self.b)


class ParaboloidDecoder(_ConstantSigma):
    """z -> (z1, z2, a (z1^2 + z2^2)); curvature grows away from the origin."""

    latent_dim = 2
    data_dim = 3

    def __init__(self, a: float = 1.0):
        self.a = float(a)

    def mu(self, z: Tensor) -> Tensor:
        bowl = Tensor(self.a) * ad.tsum(ad.square(z), axis=1, keepdims=True)
        return ad.concat([z, bowl], axis=1)


class RingDecoder(_ConstantSigma):
    """z -> (z1, z2, exp(-a (|z|^2 - 1)^2)); a ridge along the unit circle."""

    latent_dim = 2
    data_dim = 3

    def __init__(self, a: float = 4.0):
        self.a = float(a)

    def mu(self, z: Tensor) -> Tensor:
        r2 = ad.tsum(ad.square(z), axis=1, keepdims=True)
        ridge = ad.exp(-(Tensor(self.a) * ad.square(r2 - Tensor(1.0))))
        return ad.concat([z, ridge], axis=1)


class BlobImageDecoder(_ConstantSigma):
    """2-D latents rendered as Gaussian bumps on an image grid.

    The latent coordinates are the bump center in pixel units, so the map is
    smooth and its Jacobian is available exactly through the tape.
    """

    latent_dim = 2

    def __init__(self, side: int = 8, width: float = 1.3, amplitude: float = 0.9):
        self.side = int(side)
        self.width = float(width)
        self.amplitude = float(amplitude)
        self.data_dim = self.side * self.side
        gy, gx = np.mgrid[0 : self.side, 0 : self.side].astype(np.float64)
        self._gx = gx.reshape(1, -1)
        self._gy = gy.reshape(1, -1)

    def mu(self, z: Tensor) -> Tensor:
        cx = z[:, 0:1]
        cy = z[:, 1:2]
        d2 = ad.square(Tensor(self._gx) - cx) + ad.square(Tensor(self._gy) - cy)
        return Tensor(self.amplitude) * ad.exp(
            -(Tensor(1.0 / (2.0 * self.width**2)) * d2)
        )


def synth_manifold(kind: str, n: int, noise: float, seed: int):
    """Sample a synthetic dataset and return it with its exact decoder.

    Kinds: plane, paraboloid, two-cluster-blobs, ring. Images are the
    embedded points (reshaped to [N, 1, M] for the non-image kinds).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    if kind == "plane":
        A = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, -0.5]])
        dec = PlaneDecoder(A, np.zeros(3))
        u = rng.normal(0.0, 1.0, size=(n, 2))
        labels = (u[:, 0] > 0).astype(np.int64)
    elif kind == "paraboloid":
        dec = ParaboloidDecoder(a=1.0)
        u = rng.normal(0.0, 1.0, size=(n, 2))
        labels = ((u**2).sum(axis=1) > 1.0).astype(np.int64)
    elif kind == "ring":
        dec = RingDecoder(a=4.0)
        radii = 1.0 + 0.15 * rng.normal(size=n)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        u = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        labels = (u[:, 1] > 0).astype(np.int64)
    elif kind == "two-cluster-blobs":
        dec = BlobImageDecoder(side=8)
        n0 = n // 2
        centers = np.array([[2.4, 2.4], [4.6, 4.6]])
        labels = np.concatenate([np.zeros(n0, np.int64), np.ones(n - n0, np.int64)])
        u = centers[labels] + 1.05 * rng.normal(size=(n, 2))
    else:
        raise ContractError(f"unknown synthetic manifold kind {kind!r}")

    with ad.no_grad():
        clean = dec.mu(Tensor(u)).data
    images = clean + noise * rng.normal(size=clean.shape)
    if kind == "two-cluster-blobs":
        images = np.clip(images, 0.0, 1.0)
        shaped = images.reshape(n, dec.side, dec.side)
    else:
        shaped = images.reshape(n, 1, dec.data_dim)
    ds = LabeledDataset(
        images=shaped,
        labels=labels,
        notes={"kind": kind, "seed": seed, "noise": noise, "latents": u},
    )
    return ds, dec
