"""Latent-space geometry induced by a decoder.

The decoder protocol is any object with ``mu`` and ``sigma`` methods mapping
row batches [N, d] -> [N, M] of taped tensors. The pullback metric at z is
G = Jmu^T Jmu + Jsigma^T Jsigma; curvature is the finite-difference norm of
the change-rates of G's sorted eigenvalues; geodesics are natural cubic
splines whose discretized curve energy is minimized over the interior
control points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError
from .nets import Adam

EIG_FLOOR = 1e-12


@dataclass
class MetricTensor:
    """Pullback metric at a latent point, symmetrized and eigendecomposed."""

    point: np.ndarray
    G: np.ndarray
    eigenvalues: np.ndarray  # ascending

    @property
    def logdet(self) -> float:
        return float(np.log(np.maximum(self.eigenvalues, EIG_FLOOR)).sum())


@dataclass
class GeodesicPath:
    z_start: np.ndarray
    z_end: np.ndarray
    control: np.ndarray  # [C, d] interior control points
    samples: np.ndarray  # [n, d], samples[0] == z_start, samples[-1] == z_end
    energy: float
    curvature: np.ndarray | None = field(default=None)  # filled by the obfuscator


@dataclass
class GeodesicConfig:
    n_samples: int = 20
    n_control: int = 4
    lr: float = 1e-2
    max_iters: int = 200
    tol: float = 1e-6


def metric_batch(decoder, Z: np.ndarray):
    """Metric tensors for a batch of latent rows: (G [N,d,d], eig [N,d])."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    Jmu = ad.jacobian_batch(decoder.mu, Z)
    Jsig = ad.jacobian_batch(decoder.sigma, Z)
    if not (np.all(np.isfinite(Jmu)) and np.all(np.isfinite(Jsig))):
        bad = np.argwhere(
            ~(np.isfinite(Jmu).all(axis=(1, 2)) & np.isfinite(Jsig).all(axis=(1, 2)))
        )[0, 0]
        raise GeometryError(f"non-finite Jacobian at z={Z[bad].tolist()}")
    G = np.einsum("nmi,nmj->nij", Jmu, Jmu) + np.einsum("nmi,nmj->nij", Jsig, Jsig)
    G = 0.5 * (G + np.swapaxes(G, 1, 2))
    eig = np.linalg.eigvalsh(G)
    return G, eig


def pullback_metric(decoder, z: np.ndarray) -> MetricTensor:
    """Pullback metric G(z) = Jmu^T Jmu + Jsigma^T Jsigma at a single point."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    G, eig = metric_batch(decoder, z[None, :])
    return MetricTensor(point=z, G=G[0], eigenvalues=eig[0])


def logdet_metric_batch(decoder, Z: np.ndarray) -> np.ndarray:
    """log|det G| per row, eigenvalues clamped at the floor."""
    _, eig = metric_batch(decoder, Z)
    return np.log(np.maximum(eig, EIG_FLOOR)).sum(axis=1)


def curvature_fd_batch(
    decoder, Z: np.ndarray, eps: float = 1e-3, central: bool = False
) -> np.ndarray:
    """Finite-difference curvature K(z) for a batch of latent rows.

    For each coordinate direction the sorted eigenvalue vector of G is
    differenced; K is the Frobenius norm of the d x d matrix of change
    rates. One-sided differences by default; central behind the flag for
    verification runs.
    """
    if eps <= 0:
        raise GeometryError("finite-difference step must be positive")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, d = Z.shape
    stacks = [Z]
    for j in range(d):
        step = np.zeros_like(Z)
        step[:, j] = eps
        stacks.append(Z + step)
        if central:
            stacks.append(Z - step)
    _, eig = metric_batch(decoder, np.concatenate(stacks, axis=0))
    base = eig[:n]
    rates = np.empty((n, d, d))
    for j in range(d):
        if central:
            plus = eig[(1 + 2 * j) * n : (2 + 2 * j) * n]
            minus = eig[(2 + 2 * j) * n : (3 + 2 * j) * n]
            rates[:, :, j] = (plus - minus) / (2.0 * eps)
        else:
            plus = eig[(1 + j) * n : (2 + j) * n]
            rates[:, :, j] = (plus - base) / eps
    return np.sqrt((rates**2).sum(axis=(1, 2)))


def curvature_fd(decoder, z: np.ndarray, eps: float = 1e-3, central: bool = False) -> float:
    return float(curvature_fd_batch(decoder, np.asarray(z).reshape(1, -1), eps, central)[0])


def _decode_paths(decoder, Z_t: Tensor, n: int, b: int):
    """Decode [n, b, d] sample tensors into ([n,b,M] mu, [n,b,M] sigma)."""
    d = Z_t.shape[2]
    rows = ad.reshape(Z_t, (n * b, d))
    mu = decoder.mu(rows)
    sig = decoder.sigma(rows)
    m = mu.shape[1]
    return ad.reshape(mu, (n, b, m)), ad.reshape(sig, (n, b, m))


def _energy_terms(decoder, Z_t: Tensor):
    """Total curve energy (taped scalar) and per-path energies (values)."""
    n, b, _ = Z_t.shape
    mu, sig = _decode_paths(decoder, Z_t, n, b)
    dmu = mu[1:] - mu[:-1]
    dsig = sig[1:] - sig[:-1]
    total = 0.5 * (ad.tsum(ad.square(dmu)) + ad.tsum(ad.square(dsig)))
    per_path = 0.5 * (
        (dmu.data**2).sum(axis=(0, 2)) + (dsig.data**2).sum(axis=(0, 2))
    )
    return total, per_path


def curve_energy(decoder, samples: np.ndarray) -> float:
    """Discretized curve energy 0.5 * sum(|d mu|^2 + |d sigma|^2)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise GeometryError(f"need at least 2 path samples, got shape {samples.shape}")
    with ad.no_grad():
        _, per = _energy_terms(decoder, Tensor(samples[:, None, :]))
    return float(per[0])


def spline_basis(n_samples: int, n_control: int) -> np.ndarray:
    """[n_samples, n_control+2] natural-cubic cardinal basis on uniform knots."""
    knots = np.linspace(0.0, 1.0, n_control + 2)
    ts = np.linspace(0.0, 1.0, n_samples)
    basis = np.empty((n_samples, n_control + 2))
    for j in range(n_control + 2):
        e = np.zeros(n_control + 2)
        e[j] = 1.0
        basis[:, j] = CubicSpline(knots, e, bc_type="natural")(ts)
    return basis


def geodesic_batch(
    decoder,
    starts: np.ndarray,
    ends: np.ndarray,
    cfg: GeodesicConfig | None = None,
) -> list[GeodesicPath]:
    """Energy-minimizing spline paths for a batch of endpoint pairs.

    Control points start on the straight segment and are optimized with
    Adam; the best-so-far configuration is kept per path, so the returned
    energy never exceeds the straight-line initialization.
    """
    cfg = cfg or GeodesicConfig()
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    b, d = starts.shape
    n, c = cfg.n_samples, cfg.n_control
    basis = Tensor(spline_basis(n, c))

    t_interior = np.linspace(0.0, 1.0, c + 2)[1:-1]
    knots0 = starts[None, :, :] + t_interior[:, None, None] * (ends - starts)[None, :, :]
    P = Tensor(knots0.reshape(c, b * d).copy(), requires_grad=True)
    row_start = Tensor(starts.reshape(1, b * d))
    row_end = Tensor(ends.reshape(1, b * d))

    def sample_tensor() -> Tensor:
        full = ad.concat([row_start, P, row_end], axis=0)
        return ad.reshape(ad.matmul(basis, full), (n, b, d))

    with ad.no_grad():
        _, per0 = _energy_terms(decoder, sample_tensor())
    best_energy = per0.copy()
    best_knots = P.data.reshape(c, b, d).copy()
    prev_total = float(best_energy.sum())

    opt = Adam(lr=cfg.lr)
    for it in range(cfg.max_iters):
        total, per = _energy_terms(decoder, sample_tensor())
        if not np.isfinite(total.data):
            raise GeometryError("geodesic optimization diverged (non-finite energy)")
        improved = per < best_energy
        if improved.any():
            best_energy[improved] = per[improved]
            best_knots[:, improved, :] = P.data.reshape(c, b, d)[:, improved, :]
        total_best = float(best_energy.sum())
        if it > 0 and prev_total - total_best < cfg.tol * max(total_best, 1e-12):
            break
        prev_total = total_best
        grads = ad.backward(total)
        opt.step({"P": P}, {"P": grads.get(id(P), np.zeros_like(P.data))})

    paths = []
    for i in range(b):
        knots = best_knots[:, i, :]
        if np.array_equal(starts[i], ends[i]):
            # degenerate pair: exactly constant path with zero energy
            knots = np.tile(starts[i], (c, 1))
            samples = np.tile(starts[i], (n, 1))
            best_energy[i] = 0.0
        else:
            full = np.concatenate([starts[i : i + 1], knots, ends[i : i + 1]], axis=0)
            samples = spline_basis(n, c) @ full
            samples[0] = starts[i]
            samples[-1] = ends[i]
        paths.append(
            GeodesicPath(
                z_start=starts[i].copy(),
                z_end=ends[i].copy(),
                control=knots.copy(),
                samples=samples,
                energy=float(best_energy[i]),
            )
        )
    return paths


def geodesic(
    decoder, z_start: np.ndarray, z_end: np.ndarray, cfg: GeodesicConfig | None = None
) -> GeodesicPath:
    """Energy-minimizing geodesic between two latent points."""
    return geodesic_batch(
        decoder,
        np.asarray(z_start).reshape(1, -1),
        np.asarray(z_end).reshape(1, -1),
        cfg,
    )[0]


def geodesic_length(decoder, path: GeodesicPath) -> float:
    """Riemannian length: sum_i sqrt(dz_i^T G(midpoint_i) dz_i)."""
    return float(path_lengths(decoder, path.samples[:, None, :])[0])


def path_lengths(decoder, samples: np.ndarray) -> np.ndarray:
    """Lengths for a stack of discretized paths, samples shaped [n, B, d]."""
    samples = np.asarray(samples, dtype=np.float64)
    n, b, d = samples.shape
    dz = samples[1:] - samples[:-1]  # [n-1, B, d]
    mids = 0.5 * (samples[1:] + samples[:-1])
    G, _ = metric_batch(decoder, mids.reshape((n - 1) * b, d))
    G = G.reshape(n - 1, b, d, d)
    quad = np.einsum("nbi,nbij,nbj->nb", dz, G, dz)
    return np.sqrt(np.maximum(quad, 0.0)).sum(axis=0)


def linearized_distance_sq(decoder, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a-b)^T G(midpoint) (a-b) per row; the training-time stand-in for
    the squared geodesic distance."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    diff = a - b
    G, _ = metric_batch(decoder, 0.5 * (a + b))
    return np.einsum("ni,nij,nj->n", diff, G, diff)
