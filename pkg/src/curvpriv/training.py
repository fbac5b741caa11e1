"""Three-phase training schedule.

Phase 1 pre-trains the RVAE-GAN in two stages (mu, then sigma) with a
critic/generator round every ``critic_cadence`` minibatch iterations.
Phase 2 pre-trains the curvature estimator against finite-difference
targets of the frozen decoder. Phase 3 alternates four steps per minibatch:
an unperturbed ELBO step, a critic step on geodesic-perturbed fakes, a
decoder step on the critic score, and an estimator refresh against the
updated decoder's curvature.

Every random draw comes from a named stream, all optimizer state is
serialized, and checkpoints land after each epoch, so a resumed run
reproduces the uninterrupted one byte for byte.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import adversary, autodiff as ad, obfuscator, rvae
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import LabeledDataset
from .errors import ConfigError, TrainingError
from .geometry import GeodesicConfig, curvature_fd_batch
from .nets import Adam
from .rng import StreamHub

LOG_COLUMNS = ("phase", "epoch", "loss_mu", "loss_sigma", "loss_d", "loss_g", "loss_curv", "checkpoint")


@dataclass
class TrainConfig:
    # schedule
    epochs_mu: int = 100
    epochs_sigma: int = 100
    epochs_estimator: int = 50
    epochs_bilevel: int = 5
    # learning rates
    lr_rvae: float = 1e-3
    lr_critic: float = 1e-6
    lr_estimator: float = 1e-4
    lr_bilevel: float = 1e-5
    critic_cadence: int = 50
    # architecture
    batch_size: int = 64
    latent_dim: int = 2
    hidden: int = 64
    rbf_centers: int = 64
    critic_hidden: int = 64
    estimator_hidden: int = 64
    # loss knobs
    kl_weight: float = 1.0
    lambda_gp: float = 10.0
    sigma_floor: float = 1e-2
    kl_distance: str = "linearized"  # or "spline" (verification runs)
    posterior_scale_stage: str = "sigma"
    shared_rbf_weights: bool = False
    # estimator sampling
    estimator_samples: int = 256
    estimator_jitter: float = 0.1
    fd_eps: float = 1e-3
    # geodesics
    geodesic_samples: int = 20
    geodesic_control: int = 4
    geodesic_lr: float = 1e-2
    geodesic_iters: int = 200
    geodesic_tol: float = 1e-6
    # misc
    seed: int = 0

    def validate(self) -> None:
        for name in ("epochs_mu", "epochs_sigma", "epochs_estimator", "epochs_bilevel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in (
            "batch_size", "latent_dim", "hidden", "rbf_centers", "critic_hidden",
            "estimator_hidden", "critic_cadence", "estimator_samples",
            "geodesic_samples", "geodesic_control", "geodesic_iters",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_rvae", "lr_critic", "lr_estimator", "lr_bilevel",
                     "sigma_floor", "fd_eps", "geodesic_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.kl_distance not in ("linearized", "spline"):
            raise ConfigError("kl_distance must be 'linearized' or 'spline'")
        if self.posterior_scale_stage not in ("mu", "sigma"):
            raise ConfigError("posterior_scale_stage must be 'mu' or 'sigma'")

    def geodesic_config(self) -> GeodesicConfig:
        return GeodesicConfig(
            n_samples=self.geodesic_samples,
            n_control=self.geodesic_control,
            lr=self.geodesic_lr,
            max_iters=self.geodesic_iters,
            tol=self.geodesic_tol,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhaseLog:
    phase: str
    rows: list[dict] = field(default_factory=list)
    elapsed: float = 0.0  # wall clock; informational only, never serialized


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def write_log_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(col)) for col in LOG_COLUMNS) + "\n")


class Trainer:
    """Owns the models, optimizers, random streams and the progress cursor."""

    PHASES = ("phase1_mu", "phase1_sigma", "phase2", "phase3", "done")

    def __init__(self, cfg: TrainConfig, data: LabeledDataset, outdir: str | None = None):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        self.outdir = outdir
        self.hub = StreamHub(cfg.seed)
        self.data_dim = int(np.prod(data.images.shape[1:]))
        self.model = rvae.RvaeModel(
            data_dim=self.data_dim,
            latent_dim=cfg.latent_dim,
            hidden=cfg.hidden,
            n_centers=cfg.rbf_centers,
            rng=self.hub.stream("init.model"),
            sigma_floor=cfg.sigma_floor,
            kl_weight=cfg.kl_weight,
            shared_rbf_weights=cfg.shared_rbf_weights,
        )
        self.critic = adversary.Critic(
            self.data_dim,
            self.hub.stream("init.critic"),
            hidden=cfg.critic_hidden,
            lambda_gp=cfg.lambda_gp,
        )
        self.est = obfuscator.CurvatureEstimator(
            cfg.latent_dim, self.hub.stream("init.est"), hidden=cfg.estimator_hidden
        )
        self.optimizers: dict[str, Adam] = {}
        self.progress = {"phase": "phase1_mu", "epoch": 0, "iters": {"mu": 0, "sigma": 0, "bilevel": 0}}
        self.log_rows: list[dict] = []
        self.logs: dict[str, PhaseLog] = {}

    # -- plumbing -----------------------------------------------------------

    def _opt(self, name: str) -> Adam:
        if name not in self.optimizers:
            lr = {
                "phase1_mu": self.cfg.lr_rvae,
                "phase1_sigma": self.cfg.lr_rvae,
                "phase1_critic": self.cfg.lr_critic,
                "phase2_est": self.cfg.lr_estimator,
                "phase3_elbo": self.cfg.lr_bilevel,
                "phase3_critic": self.cfg.lr_bilevel,
                "phase3_dec": self.cfg.lr_bilevel,
                "phase3_est": self.cfg.lr_estimator,
            }[name]
            self.optimizers[name] = Adam(lr=lr)
        return self.optimizers[name]

    def all_parameters(self) -> dict[str, Tensor]:
        out = dict(self.model.parameters())
        out.update(self.critic.parameters())
        out.update(self.est.parameters())
        return out

    @staticmethod
    def _pick(grads: dict[int, np.ndarray], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: grads.get(id(p)) for name, p in params.items()}

    def _step(self, opt_name: str, loss: Tensor, params: dict[str, Tensor]) -> float:
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss in {opt_name}")
        grads = ad.backward(loss)
        self._opt(opt_name).step(params, self._pick(grads, params))
        return float(loss.data)

    def _batches(self, stream_name: str):
        order = self.hub.stream(stream_name).permutation(len(self.data))
        bs = self.cfg.batch_size
        flat = self.data.flat
        for lo in range(0, len(order), bs):
            idx = order[lo : lo + bs]
            yield flat[idx]

    def _distance_sq(self):
        if self.cfg.kl_distance == "spline":
            return rvae.spline_distance_sq(self.model, self.cfg.geodesic_config())
        return None

    def _log(self, phase: str, epoch: int, **losses) -> dict:
        """Append an epoch row, then checkpoint (progress must be updated
        by the caller first, so a resumed run does not redo the epoch)."""
        row = {col: None for col in LOG_COLUMNS}
        row["phase"] = phase
        row["epoch"] = epoch
        row.update(losses)
        row["checkpoint"] = f"ckpt_{phase}_{epoch:04d}.mprs" if self.outdir else None
        self.log_rows.append(row)
        if self.outdir is not None:
            self.save(os.path.join(self.outdir, row["checkpoint"]))
        return row

    # -- phase 1 -------------------------------------------------------------

    def _adversarial_round(self, batch: np.ndarray, stage: str) -> tuple[float, float]:
        """One critic step on real vs. reconstructed, then one generator step."""
        cfg = self.cfg
        n = len(batch)
        noise = self.hub.stream(f"noise.adv.{stage}")
        q = self.model.encode(batch)
        eta = noise.standard_normal((n, cfg.latent_dim))
        z = q.mu + q.sigma[:, None] * eta
        eps = noise.standard_normal((n, self.data_dim))
        fake = self.model.decode_sample(z, eps)
        dl = adversary.loss_d(self.critic, batch, fake, self.hub.stream(f"gp.{stage}"))
        d_val = self._step("phase1_critic", dl, self.critic.parameters())

        xt = Tensor(batch)
        mu_z, logsig = self.model.encode_taped(xt)
        eta2 = noise.standard_normal((n, cfg.latent_dim))
        z_t = rvae.reparameterize(mu_z, logsig, eta2)
        eps2 = noise.standard_normal((n, self.data_dim))
        fake_t = self.model.decoder_mu(z_t) + self.model.decoder_sigma.sigma(z_t) * Tensor(eps2)
        gl = adversary.loss_g(self.critic, fake_t)
        group = self.model.param_groups(cfg.posterior_scale_stage)[stage]
        g_val = self._step(f"phase1_{stage}", gl, group)
        return d_val, g_val

    def _stage_epoch(self, stage: str) -> dict:
        cfg = self.cfg
        groups = self.model.param_groups(cfg.posterior_scale_stage)
        noise = self.hub.stream(f"noise.{stage}")
        dist = self._distance_sq() if stage == "sigma" else None
        stage_losses, d_losses, g_losses = [], [], []
        for batch in self._batches(f"order.{stage}"):
            eta = noise.standard_normal((len(batch), cfg.latent_dim))
            if stage == "mu":
                loss = rvae.loss_mu(self.model, batch, eta)
            else:
                loss = rvae.loss_sigma(self.model, batch, eta, dist)
            stage_losses.append(self._step(f"phase1_{stage}", loss, groups[stage]))
            self.progress["iters"][stage] += 1
            if self.progress["iters"][stage] % cfg.critic_cadence == 0:
                d_val, g_val = self._adversarial_round(batch, stage)
                d_losses.append(d_val)
                g_losses.append(g_val)
        key = "loss_mu" if stage == "mu" else "loss_sigma"
        return {
            key: float(np.mean(stage_losses)),
            "loss_d": float(np.mean(d_losses)) if d_losses else None,
            "loss_g": float(np.mean(g_losses)) if g_losses else None,
        }

    def _init_rbf(self) -> None:
        q = self.model.encode(self.data.flat)
        rvae.normalize_latent_scale(self.model, q.mu)
        q = self.model.encode(self.data.flat)
        rvae.init_rbf_from_latents(
            self.model, q.mu, self.hub.stream("kmeans.rbf"), images=self.data.flat
        )

    def phase1_pretrain(self) -> PhaseLog:
        log = PhaseLog(phase="phase1")
        start = time.perf_counter()
        if self.progress["phase"] == "phase1_mu":
            for epoch in range(self.progress["epoch"], self.cfg.epochs_mu):
                losses = self._stage_epoch("mu")
                self.progress["epoch"] = epoch + 1
                log.rows.append(self._log("phase1_mu", epoch, **losses))
            self._init_rbf()
            self.progress.update(phase="phase1_sigma", epoch=0)
        if self.progress["phase"] == "phase1_sigma":
            for epoch in range(self.progress["epoch"], self.cfg.epochs_sigma):
                losses = self._stage_epoch("sigma")
                self.progress["epoch"] = epoch + 1
                log.rows.append(self._log("phase1_sigma", epoch, **losses))
            self.progress.update(phase="phase2", epoch=0)
        log.elapsed = time.perf_counter() - start
        self.logs["phase1"] = log
        return log

    # -- phase 2 -------------------------------------------------------------

    def _estimator_sampler(self, stream_name: str):
        return obfuscator.posterior_jitter_sampler(
            self.model,
            self.data.flat,
            self.hub.stream(stream_name),
            self.cfg.estimator_samples,
            self.cfg.estimator_jitter,
        )

    def phase2_pretrain_estimator(self) -> PhaseLog:
        log = PhaseLog(phase="phase2")
        start = time.perf_counter()
        if self.progress["phase"] == "phase2":
            sampler = self._estimator_sampler("est.phase2")
            for epoch in range(self.progress["epoch"], self.cfg.epochs_estimator):
                history = obfuscator.train_estimator(
                    self.est,
                    self.model.decoder,
                    sampler,
                    epochs=1,
                    lr=self.cfg.lr_estimator,
                    fd_eps=self.cfg.fd_eps,
                    opt=self._opt("phase2_est"),
                )
                self.progress["epoch"] = epoch + 1
                log.rows.append(self._log("phase2", epoch, loss_curv=history[-1]))
            self.progress.update(phase="phase3", epoch=0)
        log.elapsed = time.perf_counter() - start
        self.logs["phase2"] = log
        return log

    # -- phase 3 -------------------------------------------------------------

    def _p3_elbo(self, batch: np.ndarray) -> float:
        """Step 1: plain ELBO step, no perturbation, all RVAE parameters."""
        eta = self.hub.stream("noise.bilevel").standard_normal((len(batch), self.cfg.latent_dim))
        loss = rvae.loss_sigma(self.model, batch, eta, self._distance_sq())
        return self._step("phase3_elbo", loss, self.model.parameters())

    def _p3_critic(self, batch: np.ndarray) -> tuple[float, np.ndarray]:
        """Step 2: critic on real originals vs. decoded perturbed latents."""
        mu_z = self.model.encode(batch).mu
        z_pert, _ = obfuscator.perturb_batch(self.model, self.est, mu_z, self.cfg.geodesic_config())
        eps = self.hub.stream("noise.bilevel").standard_normal((len(batch), self.data_dim))
        fake = self.model.decode_sample(z_pert, eps)
        dl = adversary.loss_d(self.critic, batch, fake, self.hub.stream("gp.bilevel"))
        return self._step("phase3_critic", dl, self.critic.parameters()), z_pert

    def _p3_decoder(self, z_pert: np.ndarray) -> float:
        """Step 3: decoder step on the critic score of perturbed fakes."""
        z_t = Tensor(z_pert)
        eps = self.hub.stream("noise.bilevel").standard_normal((len(z_pert), self.data_dim))
        fake_t = self.model.decoder_mu(z_t) + self.model.decoder_sigma.sigma(z_t) * Tensor(eps)
        gl = adversary.loss_g(self.critic, fake_t)
        return self._step("phase3_dec", gl, self.model.decoder_parameters())

    def _p3_estimator(self, batch: np.ndarray) -> float:
        """Step 4: estimator refresh against the current decoder's curvature."""
        stream = self.hub.stream("est.phase3")
        q = self.model.encode(batch)
        latents = q.mu + self.cfg.estimator_jitter * stream.standard_normal(q.mu.shape)
        targets = curvature_fd_batch(self.model.decoder, latents, eps=self.cfg.fd_eps)
        pred = self.est.predict_taped(Tensor(latents))
        loss = ad.tmean(ad.square(pred - Tensor(targets[:, None])))
        return self._step("phase3_est", loss, self.est.parameters())

    def phase3_bilevel(self) -> PhaseLog:
        log = PhaseLog(phase="phase3")
        start = time.perf_counter()
        if self.progress["phase"] == "phase3":
            for epoch in range(self.progress["epoch"], self.cfg.epochs_bilevel):
                sums = {"loss_sigma": [], "loss_d": [], "loss_g": [], "loss_curv": []}
                for batch in self._batches("order.bilevel"):
                    sums["loss_sigma"].append(self._p3_elbo(batch))
                    d_val, z_pert = self._p3_critic(batch)
                    sums["loss_d"].append(d_val)
                    sums["loss_g"].append(self._p3_decoder(z_pert))
                    sums["loss_curv"].append(self._p3_estimator(batch))
                    self.progress["iters"]["bilevel"] += 1
                self.progress["epoch"] = epoch + 1
                log.rows.append(
                    self._log("phase3", epoch, **{k: float(np.mean(v)) for k, v in sums.items()})
                )
            self.progress.update(phase="done", epoch=0)
        log.elapsed = time.perf_counter() - start
        self.logs["phase3"] = log
        return log

    def run(self) -> dict[str, PhaseLog]:
        self.phase1_pretrain()
        self.phase2_pretrain_estimator()
        self.phase3_bilevel()
        return self.logs

    # -- persistence -----------------------------------------------------------

    def _checkpoint_payload(self) -> tuple[dict, dict[str, np.ndarray]]:
        blobs = {f"param.{k}": v.data for k, v in self.all_parameters().items()}
        opt_meta = {}
        for name, opt in self.optimizers.items():
            opt_meta[name] = {"step_count": opt.step_count, "lr": opt.lr}
            for pname, arr in opt.m.items():
                blobs[f"opt.{name}.m.{pname}"] = arr
            for pname, arr in opt.v.items():
                blobs[f"opt.{name}.v.{pname}"] = arr
        header = {
            "config": self.cfg.to_dict(),
            "rng": self.hub.state(),
            "progress": self.progress,
            "optimizers": opt_meta,
            "log": self.log_rows,
        }
        return header, blobs

    def save(self, path: str) -> None:
        header, blobs = self._checkpoint_payload()
        save_checkpoint(path, header, blobs)

    @classmethod
    def resume(cls, path: str, data: LabeledDataset, outdir: str | None = None) -> "Trainer":
        header, blobs = load_checkpoint(path)
        cfg = TrainConfig.from_dict(header["config"])
        trainer = cls(cfg, data, outdir=outdir)
        params = trainer.all_parameters()
        for name, p in params.items():
            p.data = blobs[f"param.{name}"]
        for opt_name, meta in header.get("optimizers", {}).items():
            opt = trainer._opt(opt_name)
            m = {}
            v = {}
            prefix_m = f"opt.{opt_name}.m."
            prefix_v = f"opt.{opt_name}.v."
            for bname, arr in blobs.items():
                if bname.startswith(prefix_m):
                    m[bname[len(prefix_m):]] = arr
                elif bname.startswith(prefix_v):
                    v[bname[len(prefix_v):]] = arr
            opt.restore({"step_count": meta["step_count"], "m": m, "v": v})
        trainer.hub.restore(header["rng"])
        trainer.progress = header["progress"]
        trainer.log_rows = list(header.get("log", []))
        return trainer
