"""Configuration-driven experiment runner.

Stages run in dependency order (pretrain -> attack -> evaluate -> defend ->
report); each stage persists its artifacts plus a content hash so reruns with
an unchanged config reuse cached outputs.
"""

import argparse
import json
import math
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import (INNER_LOSSES, OUTER_LOSSES, RunConfig, config_to_dict,
                     load_config, save_config, section_hash)
from .data import (ImageBatch, load_image_dataset, select_reference_inputs)
from .defenses import (DefenseReport, _entropy_stats, latent_separability_score,
                       nc_anomaly_index, strip_entropy_test)
from .errors import ConfigError, DependencyError
from .evaluation import (MetricsReport, compute_psnr, compute_ssim,
                         compute_stealth_suite, evaluate_attack,
                         train_downstream_probe)
from .losses import LossCoefficients
from .models import (ConvEncoder, PerceptualTaps, TriggerGenerator,
                     apply_trigger, generate_trigger, load_checkpoint,
                     pretrain_clean_encoder, save_checkpoint, state_checksum)
from .scheduler import WeightState
from .trainer import TrainConfig, run_attack_training

STAGES = ("pretrain", "attack", "evaluate", "defend", "report")
COMMANDS = STAGES + ("all",)


# ---------------------------------------------------------------------------
# shared helpers


def _stage_dir(config: RunConfig, stage: str) -> str:
    return os.path.join(config.output_dir, stage)


def _write_hash(stage_path: str, digest: str):
    with open(os.path.join(stage_path, "stage_hash.txt"), "w") as fh:
        fh.write(digest + "\n")


def _read_hash(stage_path: str) -> str | None:
    path = os.path.join(stage_path, "stage_hash.txt")
    if not os.path.isfile(path):
        return None
    with open(path) as fh:
        return fh.read().strip()


def _require_stage(config: RunConfig, needed: str, requested_by: str):
    digest = _read_hash(_stage_dir(config, needed))
    if digest is None:
        raise DependencyError(requested_by, needed)
    return digest


def _load_dataset(config: RunConfig):
    d = config.dataset
    return load_image_dataset(d.name, root=d.root, n=d.n, resize=d.resize,
                              num_classes=d.num_classes, seed=config.seed)


def _build_encoder(config: RunConfig) -> ConvEncoder:
    return ConvEncoder(feature_dim=config.model.feature_dim,
                       width=config.model.encoder_width, seed=config.seed)


def _build_taps(config: RunConfig) -> PerceptualTaps:
    return PerceptualTaps(width=config.model.taps_width, seed=config.seed)


def _weight_state(config: RunConfig) -> WeightState:
    w = config.weights
    disabled_outer = tuple(OUTER_LOSSES.index(n) for n in config.disable_losses
                           if n in OUTER_LOSSES)
    disabled_inner = tuple(INNER_LOSSES.index(n) for n in config.disable_losses
                           if n in INNER_LOSSES)
    return WeightState(outer=w.outer_bases, outer_bases=w.outer_bases,
                       eta_attack=w.eta_attack, eta_preserve=w.eta_preserve,
                       eta_dist=w.eta_dist, eta_inner=w.eta_inner,
                       eta_align=w.eta_align, alpha_momentum=w.alpha_momentum,
                       flip_distribution_gate=w.flip_distribution_gate,
                       disabled_outer=disabled_outer, disabled_inner=disabled_inner)


# ---------------------------------------------------------------------------
# stages


def stage_pretrain(config: RunConfig) -> str:
    out = _stage_dir(config, "pretrain")
    os.makedirs(out, exist_ok=True)
    expected = section_hash(config_to_dict(config)["dataset"],
                            config_to_dict(config)["pretrain"],
                            config_to_dict(config)["model"], config.seed)
    if _read_hash(out) == expected:
        return expected
    data = _load_dataset(config)
    enc = pretrain_clean_encoder(
        data, epochs=config.pretrain.epochs, seed=config.seed,
        feature_dim=config.model.feature_dim, width=config.model.encoder_width,
        batch_size=config.pretrain.batch_size, lr=config.pretrain.lr,
        temperature=config.pretrain.temperature)
    save_checkpoint(enc, os.path.join(out, "clean_encoder.pt"),
                    {"seed": config.seed, "epochs": config.pretrain.epochs})
    _write_hash(out, expected)
    return expected


def stage_attack(config: RunConfig) -> str:
    out = _stage_dir(config, "attack")
    os.makedirs(out, exist_ok=True)
    upstream = _require_stage(config, "pretrain", "attack")
    cfg_dict = config_to_dict(config)
    expected = section_hash(upstream, cfg_dict["attack"], cfg_dict["train"],
                            cfg_dict["poison"], cfg_dict["coefficients"],
                            cfg_dict["weights"], list(config.disable_losses), config.seed)
    if _read_hash(out) == expected:
        return expected

    data = _load_dataset(config)
    clean_enc = load_checkpoint(_build_encoder(config),
                                os.path.join(_stage_dir(config, "pretrain"), "clean_encoder.pt"))
    clean_enc.eval()
    refs = select_reference_inputs(config.attack.target_class, data.downstream_train, clean_enc)
    train_cfg = config.train
    result = run_attack_training(
        clean_enc, data, refs, train_cfg, coeffs=config.coefficients,
        schedule=config.poison, weights=_weight_state(config),
        taps=_build_taps(config),
        generator=TriggerGenerator(epsilon=config.coefficients.epsilon,
                                   width=config.model.generator_width, seed=config.seed))

    for name, ckpt in (("best", result.best_checkpoint), ("last", result.last_checkpoint)):
        enc_copy = _build_encoder(config)
        enc_copy.load_state_dict(ckpt["encoder"])
        save_checkpoint(enc_copy, os.path.join(out, f"backdoor_encoder_{name}.pt"))
        gen_copy = TriggerGenerator(epsilon=config.coefficients.epsilon,
                                    width=config.model.generator_width, seed=config.seed)
        gen_copy.load_state_dict(ckpt["generator"])
        save_checkpoint(gen_copy, os.path.join(out, f"generator_{name}.pt"))

    with open(os.path.join(out, "training_log.jsonl"), "w") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out, "refs.json"), "w") as fh:
        json.dump({"target_class": refs.target_class, "count": refs.count,
                   "ids": refs.inputs.ids.tolist()}, fh, sort_keys=True)
    _plot_training_curves(result.log, os.path.join(out, "training_curves.png"))
    _plot_weight_trajectories(result.log, os.path.join(out, "weight_trajectories.png"))
    _write_hash(out, expected)
    return expected


def _load_attack_artifacts(config: RunConfig, which="best"):
    attack_dir = _stage_dir(config, "attack")
    clean_enc = load_checkpoint(_build_encoder(config),
                                os.path.join(_stage_dir(config, "pretrain"), "clean_encoder.pt"))
    bd_enc = load_checkpoint(_build_encoder(config),
                             os.path.join(attack_dir, f"backdoor_encoder_{which}.pt"))
    gen = load_checkpoint(TriggerGenerator(epsilon=config.coefficients.epsilon,
                                           width=config.model.generator_width,
                                           seed=config.seed),
                          os.path.join(attack_dir, f"generator_{which}.pt"))
    for module in (clean_enc, bd_enc, gen):
        module.eval()
    return clean_enc, bd_enc, gen


def stage_evaluate(config: RunConfig) -> str:
    out = _stage_dir(config, "evaluate")
    os.makedirs(out, exist_ok=True)
    upstream = _require_stage(config, "attack", "evaluate")
    expected = section_hash(upstream, config_to_dict(config)["evaluation"], config.seed)
    if _read_hash(out) == expected:
        return expected

    data = _load_dataset(config)
    clean_enc, bd_enc, gen = _load_attack_artifacts(config)
    refs = select_reference_inputs(config.attack.target_class, data.downstream_train, clean_enc)
    ca, ba, asr = evaluate_attack(clean_enc, bd_enc, gen, refs,
                                  data.downstream_train, data.downstream_test,
                                  probe_epochs=config.evaluation.probe_epochs,
                                  seed=config.seed)

    slice_n = min(config.evaluation.stealth_slice, len(data.clean))
    clean_imgs = data.clean.subset(torch.arange(slice_n))
    with torch.no_grad():
        delta = generate_trigger(gen, clean_imgs)
    poisoned = apply_trigger(clean_imgs, delta)
    ssim = float(compute_ssim(clean_imgs.pixels, poisoned.pixels))
    psnr = compute_psnr(clean_imgs.pixels, poisoned.pixels)
    taps = _build_taps(config)
    lpips, fsim, fid = compute_stealth_suite(clean_imgs, poisoned, taps)

    report = MetricsReport(ca=ca, ba=ba, asr=asr, ssim=ssim, psnr=psnr,
                           lpips=lpips, fsim=fsim, fid=fid,
                           metadata={"seed": config.seed, "dataset": config.dataset.name,
                                     "checkpoint": "best"}).validate()
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(report.to_text())
    _plot_residuals(clean_imgs.pixels, poisoned.pixels,
                    os.path.join(out, "residuals.png"))
    _write_hash(out, expected)
    return expected


def stage_defend(config: RunConfig) -> str:
    out = _stage_dir(config, "defend")
    os.makedirs(out, exist_ok=True)
    upstream = _require_stage(config, "attack", "defend")
    expected = section_hash(upstream, config_to_dict(config)["defense"], config.seed)
    if _read_hash(out) == expected:
        return expected
    if not config.defense.enabled:
        with open(os.path.join(out, "defense.json"), "w") as fh:
            json.dump({"enabled": False}, fh)
        _write_hash(out, expected)
        return expected

    data = _load_dataset(config)
    clean_enc, bd_enc, gen = _load_attack_artifacts(config)
    probe = train_downstream_probe(bd_enc, data.downstream_train,
                                   config.evaluation.probe_epochs, seed=config.seed)

    n = min(config.defense.strip_samples, len(data.clean) // 2)
    samples = data.clean.subset(torch.arange(n))
    pool = data.clean.subset(torch.arange(n, min(2 * n, len(data.clean))))
    with torch.no_grad():
        delta = generate_trigger(gen, samples)
    poisoned = apply_trigger(samples, delta)

    clean_ent, pois_ent, strip_auroc = strip_entropy_test(
        probe, bd_enc, samples, poisoned, pool,
        n_overlays=config.defense.n_overlays, seed=config.seed)
    sep_auroc, silhouette = latent_separability_score(
        bd_enc, samples, poisoned, seed=config.seed,
        plot_path=os.path.join(out, "pca_scatter.png"))
    norms, anomaly = nc_anomaly_index(probe, bd_enc, data.downstream_test,
                                      config.dataset.num_classes,
                                      steps=config.defense.nc_steps,
                                      lam=config.defense.nc_lambda, seed=config.seed)

    report = DefenseReport(
        strip_clean_entropy=_entropy_stats(clean_ent),
        strip_poison_entropy=_entropy_stats(pois_ent),
        strip_auroc=strip_auroc, separability_auroc=sep_auroc,
        silhouette=silhouette, nc_class_norms=[float(v) for v in norms],
        nc_anomaly_index=anomaly)
    with open(os.path.join(out, "defense.json"), "w") as fh:
        json.dump(report.to_record(), fh, sort_keys=True, indent=2)
    _plot_entropy_hist(clean_ent, pois_ent, os.path.join(out, "entropy_hist.png"))
    _write_hash(out, expected)
    return expected


def stage_report(config: RunConfig) -> str:
    out = _stage_dir(config, "report")
    os.makedirs(out, exist_ok=True)
    up_eval = _require_stage(config, "evaluate", "report")
    up_def = _require_stage(config, "defend", "report")
    expected = section_hash(up_eval, up_def)
    if _read_hash(out) == expected:
        return expected

    with open(os.path.join(_stage_dir(config, "evaluate"), "metrics.json")) as fh:
        report = MetricsReport.from_text(fh.read())
    defense_path = os.path.join(_stage_dir(config, "defend"), "defense.json")
    with open(defense_path) as fh:
        defense = json.load(fh)
    if defense.get("enabled", True):
        report.strip_auroc = defense["strip_auroc"]
        report.separability_auroc = defense["separability_auroc"]
        report.nc_anomaly_index = defense["nc_anomaly_index"]
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_text())
    _write_hash(out, expected)
    return expected


STAGE_FUNCS = {"pretrain": stage_pretrain, "attack": stage_attack,
               "evaluate": stage_evaluate, "defend": stage_defend,
               "report": stage_report}


def run_experiment(config: RunConfig, command: str = "all") -> int:
    """Execute one stage or the whole pipeline; returns a process exit status."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    os.makedirs(config.output_dir, exist_ok=True)
    save_config(config, os.path.join(config.output_dir, "config.yaml"))
    stages = STAGES if command == "all" else (command,)
    for stage in stages:
        STAGE_FUNCS[stage](config)
    return 0


# ---------------------------------------------------------------------------
# plots


def _plot_training_curves(log, path):
    records = [r for r in log if "signals" in r]
    if not records:
        return
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("asr", "ssim", "feature_diff"):
        ax.plot(epochs, [r["signals"][key] for r in records], label=key)
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_weight_trajectories(log, path):
    records = [r for r in log if "weights" in r]
    if not records:
        return
    epochs = [r["epoch"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for i, name in enumerate(("omega", "mu")):
        for j in range(3):
            axes[i].plot(epochs, [r["weights"][name][j] for r in records],
                         label=f"{name}_{j + 1}")
        axes[i].set_xlabel("epoch")
        axes[i].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_residuals(clean, poisoned, path, count=6):
    count = min(count, clean.shape[0])
    residual = (poisoned - clean).abs()
    scale = float(residual.max()) or 1.0
    fig, axes = plt.subplots(3, count, figsize=(1.6 * count, 5))
    for i in range(count):
        for row, img in enumerate((clean[i], poisoned[i], residual[i] / scale)):
            ax = axes[row, i]
            ax.imshow(img.permute(1, 2, 0).clamp(0, 1).numpy())
            ax.set_axis_off()
    for row, label in enumerate(("clean", "poisoned", "residual")):
        axes[row, 0].set_title(label, loc="left", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_entropy_hist(clean_ent, pois_ent, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    bins = np.linspace(0, max(float(np.max(clean_ent)), float(np.max(pois_ent)), 1e-6), 24)
    ax.hist(clean_ent, bins=bins, alpha=0.6, label="clean")
    ax.hist(pois_ent, bins=bins, alpha=0.6, label="poisoned")
    ax.set_xlabel("overlay entropy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dsba",
        description="Run backdoor-attack experiments on self-supervised encoders.")
    parser.add_argument("command", choices=COMMANDS,
                        help="pipeline stage to run (or 'all')")
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--disable-loss", action="append", default=[],
                        choices=list(OUTER_LOSSES + INNER_LOSSES),
                        help="zero this loss term's weight (repeatable)")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        if args.out is not None:
            config.output_dir = args.out
        if args.seed is not None:
            config.seed = args.seed
        if args.disable_loss:
            config = RunConfig(**{**config.__dict__,
                                  "disable_losses": tuple(args.disable_loss)})
        return run_experiment(config, args.command)
    except (ConfigError, DependencyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
