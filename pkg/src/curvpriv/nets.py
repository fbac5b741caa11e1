"""Network building blocks: MLP, RBF precision network, conv stack, Adam.

All parameters are float64 leaf tensors; forward passes tape automatically
when grad recording is on. Parameter collections are name-keyed dicts so the
optimizer, checkpoints and the stage-freezing logic all agree on identity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, TrainingError

ACTIVATIONS = ("linear", "relu", "tanh", "softplus")


def _apply_activation(u: Tensor, tag: str) -> Tensor:
    if tag == "linear":
        return u
    if tag == "relu":
        return ad.relu(u)
    if tag == "tanh":
        return ad.tanh(u)
    if tag == "softplus":
        return ad.softplus(u)
    raise ContractError(f"unknown activation {tag!r}")


def _activation_derivative(u: Tensor, h: Tensor, tag: str) -> Tensor | None:
    """Derivative of the activation at preactivation u, as a taped expression.

    ``h`` is the already-computed activation output (reused where it makes
    the expression cheaper). Returns None for the identity.
    """
    if tag == "linear":
        return None
    if tag == "relu":
        return Tensor((u.data > 0).astype(np.float64))  # piecewise-constant mask
    if tag == "tanh":
        return Tensor(1.0) - ad.square(h)
    if tag == "softplus":
        return ad.exp(-ad.softplus(-u))  # sigmoid(u), smooth form
    raise ContractError(f"unknown activation {tag!r}")


class Dense:
    """Single affine layer with an activation tag. Weights are [in, out]."""

    def __init__(self, fan_in: int, fan_out: int, activation: str, rng: np.random.Generator):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
        self.W = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise DimensionError(
                f"dense layer expects [N, {self.W.shape[0]}], got {x.shape}"
            )
        return _apply_activation(ad.matmul(x, self.W) + self.b, self.activation)


class Mlp:
    """Stack of Dense layers; ``widths`` includes input and output sizes."""

    def __init__(self, widths: list[int], activations: list[str], rng: np.random.Generator):
        if len(activations) != len(widths) - 1:
            raise ContractError("need one activation tag per layer")
        self.layers = [
            Dense(widths[i], widths[i + 1], activations[i], rng)
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.W"] = layer.W
            out[f"{prefix}layer{i}.b"] = layer.b
        return out

    def input_gradient(self, x: Tensor) -> Tensor:
        """Gradient of a scalar-output MLP w.r.t. its input, per row.

        The backward chain is written out with taped primitives, so the
        result participates in first-order differentiation w.r.t. the layer
        parameters (this is what lets the gradient penalty train the critic
        without second-order machinery).
        """
        if self.layers[-1].W.shape[1] != 1:
            raise ContractError("input_gradient requires a scalar-output network")
        pre: list[Tensor] = []
        act: list[Tensor] = []
        h = x
        for layer in self.layers:
            u = ad.matmul(h, layer.W) + layer.b
            h = _apply_activation(u, layer.activation)
            pre.append(u)
            act.append(h)
        delta = Tensor(np.ones((x.shape[0], 1)))
        for i in reversed(range(len(self.layers))):
            deriv = _activation_derivative(pre[i], act[i], self.layers[i].activation)
            if deriv is not None:
                delta = delta * deriv
            delta = ad.matmul(delta, self.layers[i].W, tb=True)
        return delta


def mlp_forward(net: Mlp, x: Tensor) -> Tensor:
    return net(x)


class RbfNet:
    """Radial-basis precision network for the decoder's standard deviation.

    Predicts a per-channel precision beta(z) = sum_k w_k exp(-gamma_k |z-c_k|^2)
    + floor, with gamma_k = exp(log_bw_k) > 0 and w = softplus(w_raw) >= 0, so
    sigma(z) = beta(z)^(-1/2) is bounded by floor^(-1/2) and strictly positive.
    """

    def __init__(
        self,
        latent_dim: int,
        out_dim: int,
        n_centers: int,
        rng: np.random.Generator,
        floor: float = 1e-6,
        shared_weights: bool = False,
    ):
        if floor <= 0:
            raise ContractError("precision floor must be positive")
        self.floor = float(floor)
        self.out_dim = int(out_dim)
        self.shared_weights = bool(shared_weights)
        self.centers = Tensor(rng.normal(0.0, 1.0, size=(n_centers, latent_dim)), requires_grad=True)
        self.log_bw = Tensor(np.zeros(n_centers), requires_grad=True)
        w_cols = 1 if shared_weights else out_dim
        self.w_raw = Tensor(np.full((n_centers, w_cols), _inv_softplus(1.0)), requires_grad=True)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}centers": self.centers,
            f"{prefix}log_bw": self.log_bw,
            f"{prefix}w_raw": self.w_raw,
        }

    def kernel(self, z: Tensor) -> Tensor:
        """Activations exp(-gamma_k |z - c_k|^2), shape [N, K]."""
        sq = (
            ad.tsum(ad.square(z), axis=1, keepdims=True)
            - 2.0 * ad.matmul(z, self.centers, tb=True)
            + ad.tsum(ad.square(self.centers), axis=1)
        )
        return ad.exp(-(ad.exp(self.log_bw) * sq))

    def precision(self, z: Tensor) -> Tensor:
        """beta(z), shape [N, out_dim]; >= floor everywhere."""
        w = ad.softplus(self.w_raw)
        beta = ad.matmul(self.kernel(z), w) + Tensor(self.floor)
        if self.shared_weights:
            beta = beta * Tensor(np.ones(self.out_dim))
        return beta

    def sigma(self, z: Tensor) -> Tensor:
        """sigma(z) = beta(z)^(-1/2), shape [N, out_dim]."""
        return ad.exp(-0.5 * ad.log(self.precision(z)))


def rbf_sigma(net: RbfNet, z: Tensor) -> Tensor:
    return net.sigma(z)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class Conv2d:
    """3x3 convolution on channel-last images, via gather + matmul.

    Input [N, H, W, C]; padding is 'same' (zeros) or 'valid'. Index tables
    are built once per input geometry.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, pad: str = "same"):
        k = 3
        self.k = k
        self.c_in = c_in
        self.pad = pad
        scale = np.sqrt(2.0 / (k * k * c_in))
        self.W = Tensor(rng.normal(0.0, scale, size=(k * k * c_in, c_out)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self._idx_cache: dict[tuple[int, int], np.ndarray] = {}

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}W": self.W, f"{prefix}b": self.b}

    def _indices(self, hp: int, wp: int) -> np.ndarray:
        key = (hp, wp)
        if key not in self._idx_cache:
            k, c = self.k, self.c_in
            ho, wo = hp - k + 1, wp - k + 1
            rows = []
            for i in range(ho):
                for j in range(wo):
                    offs = [
                        ((i + di) * wp + (j + dj)) * c + ch
                        for di in range(k)
                        for dj in range(k)
                        for ch in range(c)
                    ]
                    rows.append(offs)
            self._idx_cache[key] = np.asarray(rows, dtype=np.intp)
        return self._idx_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        if c != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} channels, got {x.shape}")
        if self.pad == "same":
            p = self.k // 2
            zrow = Tensor(np.zeros((n, p, w, c)))
            x = ad.concat([zrow, x, zrow], axis=1)
            zcol = Tensor(np.zeros((n, h + 2 * p, p, c)))
            x = ad.concat([zcol, x, zcol], axis=2)
        hp, wp = x.shape[1], x.shape[2]
        ho, wo = hp - self.k + 1, wp - self.k + 1
        idx = self._indices(hp, wp)
        flat = ad.reshape(x, (n, hp * wp * c))
        cols = flat[:, idx]  # [N, ho*wo, k*k*c]
        cols = ad.reshape(cols, (n * ho * wo, self.k * self.k * c))
        out = ad.matmul(cols, self.W) + self.b
        return ad.reshape(out, (n, ho, wo, self.W.shape[1]))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling on channel-last images (even H and W required)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    return ad.tmean(ad.reshape(x, (n, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


class Adam:
    """Standard Adam with bias correction; deterministic given its state."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
                )
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": dict(self.m),
            "v": dict(self.v),
        }

    def restore(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


def adam_step(opt: Adam, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    opt.step(params, grads)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100):
    """Lloyd's algorithm; returns (centers, assignments, inertia).

    Deterministic given the generator state. Empty clusters are re-seeded
    from the point farthest from its assigned center.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ContractError(f"kmeans needs at least k={k} points, got {n}")
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        dist_own = d2[np.arange(n), new_assign]
        for c in range(k):
            members = new_assign == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
            else:
                far = int(dist_own.argmax())
                centers[c] = points[far]
                new_assign[far] = c
                dist_own[far] = 0.0
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    if not np.all(np.isfinite(centers)):
        raise TrainingError("kmeans produced non-finite centers")
    return centers, assign, inertia


def kmeans_bandwidths(
    points: np.ndarray,
    centers: np.ndarray,
    assign: np.ndarray,
    floor_frac: float = 0.2,
) -> np.ndarray:
    """Per-cluster gamma = 1 / (2 * mean squared member distance).

    Cluster spreads are floored at ``floor_frac`` of the global spread so
    kernels never get much narrower than the data scale; razor-thin kernels
    put every nearby latent in a steep precision transition band, which
    blows up the metric and its curvature.
    """
    k = centers.shape[0]
    msd_global = float(((points - points.mean(axis=0)) ** 2).sum(axis=1).mean())
    msd_global = max(msd_global, 1e-8)
    msd_floor = floor_frac * msd_global
    gammas = np.empty(k)
    for c in range(k):
        members = points[assign == c]
        if len(members) >= 2:
            msd = float(((members - centers[c]) ** 2).sum(axis=1).mean())
        else:
            msd = msd_global
        gammas[c] = 1.0 / (2.0 * max(msd, msd_floor))
    return gammas
