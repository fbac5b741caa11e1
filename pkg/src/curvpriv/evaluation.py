"""Privacy and utility evaluation.

The downstream task is classification with a small conv+MLP network. The
attack is the loss-based black-box membership inference: per-sample
cross-entropy of the downstream classifier is the attack feature, members
come from the original training split and non-members from the original
test split, and a binary attack model is fit on a balanced half of the
populations and scored on the held-out half.

Utility is measured by test accuracy, a feature-space Frechet distance
(penultimate-layer features of a frozen reference classifier stand in for
the usual pretrained extractor) and an entropy-based diversity score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import LabeledDataset
from .errors import ContractError
from .nets import Adam, Conv2d, Dense, Mlp, avg_pool2


@dataclass
class ClassifierConfig:
    epochs: int = 40
    lr: float = 3e-3
    batch_size: int = 64
    conv_channels: tuple = (8, 8)
    hidden: int = 64


class DownstreamClassifier:
    """Two conv blocks with mean pooling, then an MLP head.

    Inputs are [N, H, W] grayscale images; H and W must be divisible by 4.
    Row-shaped datasets (H == 1) skip the conv stack and go straight to the
    dense layers.
    """

    def __init__(self, side_hw: tuple[int, int], classes: np.ndarray,
                 cfg: ClassifierConfig, rng: np.random.Generator):
        self.h, self.w = side_hw
        self.classes = np.asarray(classes)
        self.cfg = cfg
        n_out = len(self.classes)
        self._convolutional = self.h > 1 and self.h % 4 == 0 and self.w % 4 == 0
        if self._convolutional:
            c1, c2 = cfg.conv_channels
            self.conv1 = Conv2d(1, c1, rng, pad="same")
            self.conv2 = Conv2d(c1, c2, rng, pad="same")
            flat_dim = (self.h // 4) * (self.w // 4) * c2
        else:
            self.conv1 = self.conv2 = None
            flat_dim = self.h * self.w
        self.dense = Dense(flat_dim, cfg.hidden, "relu", rng)
        self.head = Dense(cfg.hidden, n_out, "linear", rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self._convolutional:
            out.update(self.conv1.parameters("conv1."))
            out.update(self.conv2.parameters("conv2."))
        out["dense.W"] = self.dense.W
        out["dense.b"] = self.dense.b
        out["head.W"] = self.head.W
        out["head.b"] = self.head.b
        return out

    def _trunk(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if self._convolutional:
            img = ad.reshape(x, (n, self.h, self.w, 1))
            h = avg_pool2(self.conv1(img).relu())
            h = avg_pool2(self.conv2(h).relu())
            h = ad.reshape(h, (n, -1))
        else:
            h = ad.reshape(x, (n, self.h * self.w))
        return self.dense(h)

    def logits_taped(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feats = self._trunk(x)
        return self.head(feats), feats

    def logits(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        with ad.no_grad():
            out, _ = self.logits_taped(Tensor(flat))
        return out.data

    def features(self, images: np.ndarray) -> np.ndarray:
        """Penultimate-layer activations (the feature space for Frechet)."""
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        with ad.no_grad():
            _, feats = self.logits_taped(Tensor(flat))
        return feats.data

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.classes[self.logits(images).argmax(axis=1)]

    def loss_per_sample(self, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Cross-entropy of each sample under the classifier."""
        logits = self.logits(images)
        y = np.searchsorted(self.classes, np.asarray(labels))
        lse = _logsumexp(logits)
        return lse - logits[np.arange(len(logits)), y]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def _cross_entropy_taped(logits: Tensor, y_idx: np.ndarray) -> Tensor:
    m = Tensor(logits.data.max(axis=1, keepdims=True))  # detached shift
    lse = ad.log(ad.tsum(ad.exp(logits - m), axis=1)) + ad.reshape(m, (-1,))
    picked = logits[np.arange(len(y_idx)), y_idx]
    return ad.tmean(lse - picked)


def train_downstream(
    ds: LabeledDataset, cfg: ClassifierConfig, rng: np.random.Generator
) -> DownstreamClassifier:
    """Cross-entropy training of the downstream classifier; deterministic
    given the generator state."""
    classes = np.unique(ds.labels)
    if len(classes) < 2:
        raise ContractError("downstream training needs at least 2 classes")
    clf = DownstreamClassifier(ds.images.shape[1:3], classes, cfg, rng)
    params = clf.parameters()
    opt = Adam(lr=cfg.lr)
    flat = ds.flat
    y = np.searchsorted(classes, ds.labels)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(ds))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits, _ = clf.logits_taped(Tensor(flat[idx]))
            loss = _cross_entropy_taped(logits, y[idx])
            grads = ad.backward(loss)
            opt.step(params, {k: grads.get(id(p)) for k, p in params.items()})
    return clf


def classifier_accuracy(clf: DownstreamClassifier, ds: LabeledDataset) -> float:
    return float((clf.predict(ds.images) == ds.labels).mean())


# -- membership inference ------------------------------------------------------


@dataclass
class MiaReport:
    accuracy: float
    n_members: int
    n_nonmembers: int
    attack_model: str
    member_eval: dict = field(default_factory=dict)
    nonmember_eval: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "attack_accuracy": self.accuracy,
            "n_members": self.n_members,
            "n_nonmembers": self.n_nonmembers,
            "attack_model": self.attack_model,
            "member_eval": {k: list(map(float, v)) for k, v in self.member_eval.items()},
            "nonmember_eval": {k: list(map(float, v)) for k, v in self.nonmember_eval.items()},
        }


def _fit_logistic_1d(x: np.ndarray, y: np.ndarray):
    """Newton-fit logistic regression on one standardized feature."""
    mu, sd = x.mean(), x.std()
    sd = sd if sd > 1e-12 else 1.0
    xs = (x - mu) / sd
    w, b = 0.0, 0.0
    for _ in range(100):
        t = w * xs + b
        p = 1.0 / (1.0 + np.exp(-np.clip(t, -500, 500)))
        g_w = ((p - y) * xs).mean() + 1e-6 * w
        g_b = (p - y).mean()
        s = np.maximum(p * (1 - p), 1e-9)
        h_ww = (s * xs * xs).mean() + 1e-6
        h_bb = s.mean() + 1e-9
        step_w = g_w / h_ww
        step_b = g_b / h_bb
        w -= np.clip(step_w, -10, 10)
        b -= np.clip(step_b, -10, 10)
        if abs(step_w) + abs(step_b) < 1e-10:
            break

    def score(values: np.ndarray) -> np.ndarray:
        t = w * ((values - mu) / sd) + b
        return 1.0 / (1.0 + np.exp(-np.clip(t, -500, 500)))

    return score


def _fit_mlp_attack(feats: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    """Small MLP attack on the full softmax vector (optional variant)."""
    net = Mlp([feats.shape[1], 16, 1], ["tanh", "linear"], rng)
    params = net.parameters("attack.")
    opt = Adam(lr=1e-2)
    yt = y[:, None].astype(np.float64)
    for _ in range(300):
        logits = net(Tensor(feats))
        # logistic loss: softplus(t) - y * t
        loss = ad.tmean(ad.softplus(logits) - Tensor(yt) * logits)
        grads = ad.backward(loss)
        opt.step(params, {k: grads.get(id(p)) for k, p in params.items()})

    def score(values: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            t = net(Tensor(values)).data[:, 0]
        return 1.0 / (1.0 + np.exp(-np.clip(t, -500, 500)))

    return score


def mia_attack(
    clf: DownstreamClassifier,
    members: LabeledDataset,
    nonmembers: LabeledDataset,
    rng: np.random.Generator,
    attack_model: str = "logistic",
) -> MiaReport:
    """Loss-based black-box membership inference against a classifier.

    Populations are balanced by down-sampling the larger one, each side is
    split 50/50 into attack-train and attack-eval (so the evaluation split
    stays exactly balanced), and accuracy is reported on attack-eval.
    """
    if len(members) == 0 or len(nonmembers) == 0:
        raise ContractError("member and non-member sets must be nonempty")
    m_loss = clf.loss_per_sample(members.images, members.labels)
    n_loss = clf.loss_per_sample(nonmembers.images, nonmembers.labels)

    size = min(len(m_loss), len(n_loss))
    m_idx = np.sort(rng.choice(len(m_loss), size=size, replace=False))
    n_idx = np.sort(rng.choice(len(n_loss), size=size, replace=False))
    m_idx = rng.permutation(m_idx)
    n_idx = rng.permutation(n_idx)
    half = size // 2
    m_train, m_eval = m_idx[:half], m_idx[half : 2 * half]
    n_train, n_eval = n_idx[:half], n_idx[half : 2 * half]

    if attack_model == "logistic":
        x_train = np.concatenate([m_loss[m_train], n_loss[n_train]])
        y_train = np.concatenate([np.ones(half), np.zeros(half)])
        score = _fit_logistic_1d(x_train, y_train)
        m_scores = score(m_loss[m_eval])
        n_scores = score(n_loss[n_eval])
    elif attack_model == "mlp":
        m_proba = clf.predict_proba(members.images)
        n_proba = clf.predict_proba(nonmembers.images)
        feats_train = np.concatenate([m_proba[m_train], n_proba[n_train]])
        y_train = np.concatenate([np.ones(half), np.zeros(half)])
        score = _fit_mlp_attack(feats_train, y_train, rng)
        m_scores = score(m_proba[m_eval])
        n_scores = score(n_proba[n_eval])
    else:
        raise ContractError(f"unknown attack model {attack_model!r}")

    preds = np.concatenate([m_scores, n_scores]) > 0.5
    truth = np.concatenate([np.ones(half, bool), np.zeros(half, bool)])
    accuracy = float((preds == truth).mean())
    return MiaReport(
        accuracy=accuracy,
        n_members=half,
        n_nonmembers=half,
        attack_model=attack_model,
        member_eval={
            "indices": m_eval.astype(float),
            "losses": m_loss[m_eval],
            "scores": m_scores,
            "flagged": (m_scores > 0.5).astype(float),
        },
        nonmember_eval={
            "indices": n_eval.astype(float),
            "losses": n_loss[n_eval],
            "scores": n_scores,
            "flagged": (n_scores > 0.5).astype(float),
        },
    )


# -- utility metrics -------------------------------------------------------------


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_feature_distance(extractor, set_a: np.ndarray, set_b: np.ndarray) -> float:
    """|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), eigen-based root."""
    fa = np.atleast_2d(np.asarray(extractor(set_a), dtype=np.float64))
    fb = np.atleast_2d(np.asarray(extractor(set_b), dtype=np.float64))
    if len(fa) < 2 or len(fb) < 2:
        raise ContractError("need at least 2 samples per set")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    S_a = np.atleast_2d(np.cov(fa, rowvar=False))
    S_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = _sqrt_psd(S_a)
    cross_vals = np.linalg.eigvalsh(root_a @ S_b @ root_a)
    tr_cross = np.sqrt(np.maximum(cross_vals, 0.0)).sum()
    fd = float(((mu_a - mu_b) ** 2).sum() + np.trace(S_a) + np.trace(S_b) - 2.0 * tr_cross)
    return max(fd, 0.0)


def diversity_score(predict_proba, images: np.ndarray) -> float:
    """exp(mean KL(p(y|x) || mean p)); 1 for a uniform predictor, up to the
    class count for a covering one-hot predictor."""
    if len(images) == 0:
        raise ContractError("empty set")
    p = np.asarray(predict_proba(images), dtype=np.float64)
    p_bar = p.mean(axis=0, keepdims=True)
    ratio = np.zeros_like(p)
    mask = p > 0
    ratio[mask] = p[mask] * (np.log(p[mask]) - np.log(np.broadcast_to(p_bar, p.shape)[mask]))
    return float(np.exp(ratio.sum(axis=1).mean()))


@dataclass
class UtilityReport:
    test_accuracy: float
    frechet_distance: float
    diversity: float

    def to_json(self) -> dict:
        return {
            "test_accuracy": self.test_accuracy,
            "frechet_distance": self.frechet_distance,
            "diversity": self.diversity,
        }


# -- curvature vs. vulnerability -------------------------------------------------


def local_covariance_proxy(points: np.ndarray, k: int, intrinsic_dim: int) -> np.ndarray:
    """Per-point curvature proxy: share of local covariance spectrum beyond
    the top ``intrinsic_dim`` eigenvalues, in [0, 1]."""
    X = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(X)
    if k >= n:
        raise ContractError(f"k={k} neighbors but only {n} samples")
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    proxies = np.empty(n)
    for i in range(n):
        neigh = np.argsort(d2[i], kind="stable")[: k + 1]  # self plus k nearest
        local = X[neigh]
        cov = np.cov(local, rowvar=False)
        vals = np.maximum(np.linalg.eigvalsh(np.atleast_2d(cov)), 0.0)[::-1]
        total = vals.sum()
        proxies[i] = float(vals[intrinsic_dim:].sum() / total) if total > 0 else 0.0
    return proxies


def curvature_vulnerability_report(
    images: np.ndarray,
    success_flags: np.ndarray,
    k: int = 15,
    intrinsic_dim: int = 2,
) -> dict:
    """Mean curvature proxy for MIA-vulnerable vs. invulnerable samples,
    plus the point-biserial correlation between flag and proxy."""
    flags = np.asarray(success_flags, dtype=bool)
    proxies = local_covariance_proxy(images, k, intrinsic_dim)
    if len(flags) != len(proxies):
        raise ContractError("one success flag per sample required")
    vulnerable = proxies[flags]
    invulnerable = proxies[~flags]
    corr = None
    if 0 < flags.sum() < len(flags) and proxies.std() > 1e-15:
        corr = float(np.corrcoef(flags.astype(float), proxies)[0, 1])
    return {
        "mean_vulnerable": float(vulnerable.mean()) if len(vulnerable) else None,
        "mean_invulnerable": float(invulnerable.mean()) if len(invulnerable) else None,
        "correlation": corr,
        "proxies": proxies,
        "n_vulnerable": int(flags.sum()),
        "n_invulnerable": int((~flags).sum()),
    }


# -- latent-perturbation loss sensitivity -----------------------------------------


def loss_sensitivity_probe(
    decoder,
    loss_fn,
    curvature_fn,
    latents: np.ndarray,
    eps_probe: float,
    trials: int,
    rng: np.random.Generator,
) -> dict:
    """Empirical probe of how classifier loss reacts to latent nudges.

    For each latent, ``trials`` random unit directions are scaled to
    ``eps_probe``, decoded, and the mean absolute loss change is recorded;
    the report pairs that with the curvature estimate and their rank
    correlation. A zero-variance curvature column is flagged as degenerate
    rather than correlated.
    """
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n, d = Z.shape
    base_x = _decode_values(decoder, Z)
    base_loss = np.asarray(loss_fn(base_x), dtype=np.float64)
    deltas = np.zeros(n)
    for _ in range(trials):
        dirs = rng.standard_normal((n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pert_x = _decode_values(decoder, Z + eps_probe * dirs)
        deltas += np.abs(np.asarray(loss_fn(pert_x)) - base_loss)
    deltas /= trials
    khat = np.asarray(curvature_fn(Z), dtype=np.float64)
    if khat.std() < 1e-15:
        status = "degenerate: zero-variance curvature"
        corr = None
    else:
        status = "ok"
        corr = float(spearmanr(khat, deltas).statistic)
    return {
        "status": status,
        "rank_correlation": corr,
        "curvature": khat,
        "mean_delta_loss": deltas,
        "eps_probe": eps_probe,
        "trials": trials,
    }


def _decode_values(decoder, Z: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return decoder.mu(Tensor(Z)).data
