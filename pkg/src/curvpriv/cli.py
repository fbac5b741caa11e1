"""Command-line pipeline driver.

Verbs: train, publish, attack, evaluate, baseline, probe. Settings come
from an INI config file; ``--set section.key=value`` overrides individual
entries. Unknown sections or keys are rejected. Exit codes: 0 success,
2 configuration error, 3 data/artifact error, 4 training error; the reason
is printed as a single machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import dataio, evaluation, geometry, obfuscator, rvae
from .baselines import BaselineConfig, run_baseline
from .dataio import LabeledDataset, imbalance_downsample, load_idx, save_idx, synth_manifold
from .errors import ConfigError, CurvprivError, DataError, TrainingError
from .training import TrainConfig, Trainer, write_log_csv

# (type, default, help) per section/key; defaults show up in --help.
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source": (str, "synthetic", "synthetic | idx"),
        "kind": (str, "two-cluster-blobs", "synthetic manifold kind"),
        "n_train": (int, 2000, "synthetic training samples before imbalance"),
        "n_test": (int, 1000, "synthetic test samples"),
        "noise": (float, 0.15, "synthetic pixel noise level"),
        "tail_classes": (str, "1", "comma-separated tail class ids ('' = none)"),
        "tail_fraction": (float, 0.1, "tail classes keep this fraction of the head size"),
        "train_images": (str, "", "IDX image file (source=idx)"),
        "train_labels": (str, "", "IDX label file (source=idx)"),
        "test_images": (str, "", "IDX image file (source=idx)"),
        "test_labels": (str, "", "IDX label file (source=idx)"),
        "seed": (int, -1, "data seed; -1 means reuse train.seed"),
    },
    "train": {name: (type(getattr(TrainConfig(), name)), getattr(TrainConfig(), name), "")
              for name in TrainConfig().to_dict()},
    "classifier": {
        "epochs": (int, 40, "downstream classifier epochs"),
        "lr": (float, 3e-3, ""),
        "batch_size": (int, 64, ""),
        "hidden": (int, 64, ""),
    },
    "eval": {
        "attack_model": (str, "logistic", "logistic | mlp"),
        "knn": (int, 15, "neighbors for the curvature proxy"),
        "intrinsic_dim": (int, 2, "top eigenvalues excluded from the proxy"),
        "probe_eps": (float, 1e-3, "latent probe perturbation size"),
        "probe_trials": (int, 8, "random directions per probed latent"),
    },
    "baseline": {
        "method": (str, "pixelate", "pixelate | blur | kanon"),
        "block": (int, 3, "pixelation block size"),
        "radius": (float, 1.5, "blur radius"),
        "k": (int, 10, "k-anonymity parameter"),
        "clusters": (int, 1000, "k-anonymity cluster count"),
    },
    "probe": {
        "target": (str, "fixture", "fixture | checkpoint"),
        "fixture": (str, "paraboloid", "plane | paraboloid | ring | two-cluster-blobs"),
        "checkpoint": (str, "", "checkpoint path (target=checkpoint)"),
        "points": (int, 200, "number of probed latent points"),
        "eps": (float, 1e-3, "finite-difference step"),
    },
    "publish": {
        "checkpoint": (str, "", "checkpoint to publish from ('' = <out>/checkpoints/ckpt_final.mprs)"),
    },
    "attack": {
        "target": (str, "published", "published | original: which training set the victim classifier used"),
    },
    "output": {
        "dir": (str, "out", "output directory"),
    },
}


class RunSettings:
    """Validated, typed view of the config file plus overrides."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.values["train"]))

    def classifier_config(self) -> evaluation.ClassifierConfig:
        c = self.values["classifier"]
        return evaluation.ClassifierConfig(
            epochs=c["epochs"], lr=c["lr"], batch_size=c["batch_size"], hidden=c["hidden"]
        )

    def baseline_config(self) -> BaselineConfig:
        b = self.values["baseline"]
        return BaselineConfig(
            block=b["block"], radius=b["radius"], k=b["k"], clusters=b["clusters"],
            seed=self.values["train"]["seed"],
        )


def _coerce(section: str, key: str, raw: str):
    typ, _, _ = SCHEMA[section][key]
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc


def load_settings(config_path: str | None, overrides: list[str]) -> RunSettings:
    values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        parser = configparser.ConfigParser()
        parser.read(config_path)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[section][key] = _coerce(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw)
    return RunSettings(values)


def build_datasets(settings: RunSettings) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) datasets per the [data] section."""
    d = settings["data"]
    if d["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise DataError(f"data.{key} required when data.source=idx")
            if not os.path.exists(d[key]):
                raise DataError(f"missing dataset file: {d[key]}")
        train = load_idx(d["train_images"], d["train_labels"])
        test = load_idx(d["test_images"], d["test_labels"])
        test.split = "test"
    elif d["source"] == "synthetic":
        seed = d["seed"] if d["seed"] >= 0 else settings["train"]["seed"]
        train, _ = synth_manifold(d["kind"], d["n_train"], d["noise"], seed)
        test, _ = synth_manifold(d["kind"], d["n_test"], d["noise"], seed + 1)
        test.split = "test"
    else:
        raise ConfigError(f"unknown data.source {d['source']!r}")
    tails = [int(t) for t in d["tail_classes"].split(",") if t.strip() != ""]
    if tails and d["tail_fraction"] < 1.0:
        rng = np.random.Generator(np.random.Philox(key=settings["train"]["seed"] + 7))
        train = imbalance_downsample(train, tails, d["tail_fraction"], rng)
    return train, test


def _outdir(settings: RunSettings, *parts: str) -> str:
    path = os.path.join(settings["output"]["dir"], *parts)
    os.makedirs(path, exist_ok=True)
    return path


def _checkpoint_path(settings: RunSettings) -> str:
    explicit = settings["publish"]["checkpoint"]
    if explicit:
        return explicit
    return os.path.join(settings["output"]["dir"], "checkpoints", "ckpt_final.mprs")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_published(settings: RunSettings) -> LabeledDataset:
    pub_dir = os.path.join(settings["output"]["dir"], "published")
    images = os.path.join(pub_dir, "images.idx")
    labels = os.path.join(pub_dir, "labels.idx")
    if not (os.path.exists(images) and os.path.exists(labels)):
        raise DataError(f"missing artifact: published dataset under {pub_dir}")
    return load_idx(images, labels)


# -- verbs ----------------------------------------------------------------------


def cmd_train(settings: RunSettings) -> int:
    train, _ = build_datasets(settings)
    cfg = settings.train_config()
    ckpt_dir = _outdir(settings, "checkpoints")
    trainer = Trainer(cfg, train, outdir=ckpt_dir)
    logs = trainer.run()
    trainer.save(os.path.join(ckpt_dir, "ckpt_final.mprs"))
    log_dir = _outdir(settings, "logs")
    write_log_csv(trainer.log_rows, os.path.join(log_dir, "training_log.csv"))
    for name, log in logs.items():
        print(f"{name}: {len(log.rows)} epochs, {log.elapsed:.1f}s")
    print(f"checkpoint: {os.path.join(ckpt_dir, 'ckpt_final.mprs')}")
    return 0


def cmd_publish(settings: RunSettings) -> int:
    ckpt = _checkpoint_path(settings)
    if not os.path.exists(ckpt):
        raise DataError(f"missing artifact: checkpoint {ckpt}")
    train, _ = build_datasets(settings)
    trainer = Trainer.resume(ckpt, train)
    published = obfuscator.publish(
        trainer.model,
        trainer.est,
        train.images,
        train.labels,
        trainer.cfg.geodesic_config(),
        provenance={"seed": trainer.cfg.seed, "checkpoint": os.path.basename(ckpt)},
    )
    pub_dir = _outdir(settings, "published")
    save_idx(
        LabeledDataset(published.images, published.labels, "published"),
        os.path.join(pub_dir, "images.idx"),
        os.path.join(pub_dir, "labels.idx"),
    )
    with open(os.path.join(pub_dir, "manifest.jsonl"), "w") as f:
        for row in published.manifest:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"published {len(published.labels)} samples to {pub_dir}")
    return 0


def cmd_attack(settings: RunSettings) -> int:
    train, test = build_datasets(settings)
    target = settings["attack"]["target"]
    if target == "published":
        victim_train = _load_published(settings)
    elif target == "original":
        victim_train = train
    else:
        raise ConfigError(f"unknown attack.target {target!r}")
    seed = settings["train"]["seed"]
    clf = evaluation.train_downstream(
        victim_train, settings.classifier_config(),
        np.random.Generator(np.random.Philox(key=seed + 11)),
    )
    report = evaluation.mia_attack(
        clf, train, test,
        np.random.Generator(np.random.Philox(key=seed + 13)),
        attack_model=settings["eval"]["attack_model"],
    )
    out = _outdir(settings, "reports")
    payload = report.to_json()
    payload["victim_training_set"] = target
    _write_json(os.path.join(out, f"mia_{target}.json"), payload)
    print(f"attack accuracy ({target}): {report.accuracy:.4f}")
    return 0


def cmd_evaluate(settings: RunSettings) -> int:
    train, test = build_datasets(settings)
    published = _load_published(settings)
    seed = settings["train"]["seed"]
    clf_cfg = settings.classifier_config()
    clf_pub = evaluation.train_downstream(
        published, clf_cfg, np.random.Generator(np.random.Philox(key=seed + 11))
    )
    extractor = evaluation.train_downstream(
        train, clf_cfg, np.random.Generator(np.random.Philox(key=seed + 17))
    )
    report = evaluation.UtilityReport(
        test_accuracy=evaluation.classifier_accuracy(clf_pub, test),
        frechet_distance=evaluation.frechet_feature_distance(
            extractor.features, train.images, published.images
        ),
        diversity=evaluation.diversity_score(extractor.predict_proba, published.images),
    )
    out = _outdir(settings, "reports")
    _write_json(os.path.join(out, "utility.json"), report.to_json())
    print(
        f"test accuracy {report.test_accuracy:.4f}, "
        f"frechet {report.frechet_distance:.4f}, diversity {report.diversity:.4f}"
    )
    return 0


def cmd_baseline(settings: RunSettings) -> int:
    train, _ = build_datasets(settings)
    method = settings["baseline"]["method"]
    published = run_baseline(train, method, settings.baseline_config())
    out = _outdir(settings, f"baseline_{method}")
    save_idx(
        LabeledDataset(published.images, published.labels, "published"),
        os.path.join(out, "images.idx"),
        os.path.join(out, "labels.idx"),
    )
    with open(os.path.join(out, "manifest.jsonl"), "w") as f:
        for row in published.manifest:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"baseline {method}: {len(published.labels)} samples to {out}")
    return 0


def _probe_fixture(settings: RunSettings):
    p = settings["probe"]
    seed = settings["train"]["seed"]
    ds, decoder = synth_manifold(p["fixture"], max(p["points"], 8), 0.0, seed)
    latents = ds.notes["latents"][: p["points"]]
    labels = ds.labels[: p["points"]]
    return decoder, latents, labels, None


def _probe_checkpoint(settings: RunSettings):
    p = settings["probe"]
    if not p["checkpoint"] or not os.path.exists(p["checkpoint"]):
        raise DataError(f"missing artifact: probe checkpoint {p['checkpoint']!r}")
    train, _ = build_datasets(settings)
    trainer = Trainer.resume(p["checkpoint"], train)
    q = trainer.model.encode(train.flat[: p["points"]])
    labels = train.labels[: p["points"]]
    return trainer.model.decoder, q.mu, labels, trainer.model


def cmd_probe(settings: RunSettings) -> int:
    p = settings["probe"]
    if p["target"] == "fixture":
        decoder, latents, labels, model = _probe_fixture(settings)
    elif p["target"] == "checkpoint":
        decoder, latents, labels, model = _probe_checkpoint(settings)
    else:
        raise ConfigError(f"unknown probe.target {p['target']!r}")

    _, eig = geometry.metric_batch(decoder, latents)
    curv = geometry.curvature_fd_batch(decoder, latents, eps=p["eps"])
    out = _outdir(settings, "probe")
    d = latents.shape[1]
    with open(os.path.join(out, "geometry.csv"), "w") as f:
        cols = [f"z{i}" for i in range(d)] + [f"lambda{i}" for i in range(d)] + ["curvature"]
        f.write(",".join(cols) + "\n")
        for i in range(len(latents)):
            vals = list(latents[i]) + list(eig[i]) + [curv[i]]
            f.write(",".join(repr(float(v)) for v in vals) + "\n")

    seed = settings["train"]["seed"]
    rng = np.random.Generator(np.random.Philox(key=seed + 23))
    target_x = _decode_mean(decoder, latents[:1])[0]
    probe = evaluation.loss_sensitivity_probe(
        decoder,
        lambda x: ((x - target_x) ** 2).sum(axis=1),
        lambda Z: geometry.curvature_fd_batch(decoder, Z, eps=p["eps"]),
        latents,
        eps_probe=settings["eval"]["probe_eps"],
        trials=settings["eval"]["probe_trials"],
        rng=rng,
    )
    with open(os.path.join(out, "sensitivity.csv"), "w") as f:
        f.write("curvature,mean_delta_loss\n")
        for kv, dv in zip(probe["curvature"], probe["mean_delta_loss"]):
            f.write(f"{float(kv)!r},{float(dv)!r}\n")

    if d == 2:
        ends = _geodesic_endpoints(latents, labels)
        path = geometry.geodesic(decoder, latents[ends[0]], latents[ends[1]])
        svg = latent_svg(latents, labels, path.samples)
        with open(os.path.join(out, "latent_space.svg"), "w") as f:
            f.write(svg)
    print(f"probe wrote {out}")
    return 0


def _decode_mean(decoder, Z: np.ndarray) -> np.ndarray:
    from . import autodiff as ad
    from .autodiff import Tensor

    with ad.no_grad():
        return decoder.mu(Tensor(Z)).data


def _geodesic_endpoints(latents: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    classes = np.unique(labels)
    if len(classes) >= 2:
        a = int(np.flatnonzero(labels == classes[0])[0])
        b = int(np.flatnonzero(labels == classes[1])[0])
        return a, b
    d2 = ((latents[:, None, :] - latents[None, :, :]) ** 2).sum(axis=2)
    return tuple(int(v) for v in np.unravel_index(np.argmax(d2), d2.shape))


def latent_svg(latents: np.ndarray, labels: np.ndarray, polyline: np.ndarray,
               size: int = 480) -> str:
    """Minimal deterministic SVG: latent scatter plus a geodesic polyline."""
    lo = latents.min(axis=0)
    hi = latents.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    margin = 20.0

    def to_px(pt):
        x = margin + (pt[0] - lo[0]) / span[0] * (size - 2 * margin)
        y = size - (margin + (pt[1] - lo[1]) / span[1] * (size - 2 * margin))
        return x, y

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b",
               "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#ff7f0e"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    classes = {c: i for i, c in enumerate(np.unique(labels))}
    for pt, lab in zip(latents, labels):
        x, y = to_px(pt)
        color = palette[classes[lab] % len(palette)]
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
    pts = " ".join("{:.2f},{:.2f}".format(*to_px(p)) for p in polyline)
    parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="2"/>')
    straight = " ".join("{:.2f},{:.2f}".format(*to_px(p)) for p in (polyline[0], polyline[-1]))
    parts.append(
        f'<polyline points="{straight}" fill="none" stroke="#d62728" '
        f'stroke-width="1.5" stroke-dasharray="6,4"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- entry point -----------------------------------------------------------------


def _schema_help() -> str:
    lines = ["config file sections and defaults:"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (typ, default, help_text) in keys.items():
            suffix = f"  ({help_text})" if help_text else ""
            lines.append(f"    {key} = {default!r}{suffix}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curvpriv",
        description="Curvature-guided geodesic obfuscation pipeline",
        epilog=_schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("verb", choices=["train", "publish", "attack", "evaluate", "baseline", "probe"])
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed and data.seed")
    parser.add_argument("--epochs-bilevel", type=int, default=None, help="override train.epochs_bilevel")
    parser.add_argument("--out", default=None, help="override output.dir")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (this implementation always runs sequentially)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, args.set)
        if args.seed is not None:
            settings["train"]["seed"] = args.seed
            settings["data"]["seed"] = args.seed
        if args.epochs_bilevel is not None:
            settings["train"]["epochs_bilevel"] = args.epochs_bilevel
        if args.out is not None:
            settings["output"]["dir"] = args.out
        handler = {
            "train": cmd_train,
            "publish": cmd_publish,
            "attack": cmd_attack,
            "evaluate": cmd_evaluate,
            "baseline": cmd_baseline,
            "probe": cmd_probe,
        }[args.verb]
        return handler(settings)
    except ConfigError as exc:
        print(f'error kind=config exit=2 reason="{exc}"', file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f'error kind=data exit=3 reason="{exc}"', file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f'error kind=training exit=4 reason="{exc}"', file=sys.stderr)
        return 4
    except CurvprivError as exc:
        print(f'error kind=training exit=4 reason="{exc}"', file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
