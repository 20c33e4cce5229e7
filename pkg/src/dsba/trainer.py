"""Two-phase collaborative attack training.

Phase I freezes the backdoor encoder and trains the trigger generator on the
inner objective. Phase II alternates: the generator trains on three of every
four epochs, the encoder on the fourth. A per-epoch measurement pass feeds the
adaptive weight scheduler and the convergence / early-stopping checks.
"""

import copy
import math
from dataclasses import dataclass, field, replace

import torch

from . import losses as L
from .data import (DatasetSplit, ImageBatch, PoisonSchedule, ReferenceSet,
                   light_augment, poison_rate_at_epoch)
from .errors import ConfigError, TrainingDivergedError
from .evaluation import compute_ssim, train_downstream_probe
from .models import PerceptualTaps, TriggerGenerator, clone_encoder, poison_pixels
from .scheduler import (ScheduleSignals, WeightState, update_inner_weights,
                        update_outer_weights)

CONTINUE = "continue"
CONVERGED = "converged"
EARLY_STOP = "early_stop"

PHASE_FOUNDATION = "foundation"
PHASE_COOPT = "co-optimization"

# inner base weight orderings for the two phases: stealth-first, then effectiveness-first
PHASE1_INNER_BASES = (0.3, 0.5, 0.2)
PHASE2_INNER_BASES = (0.5, 0.3, 0.2)


@dataclass
class TrainConfig:
    total_epochs: int = 30
    phase1_fraction: float = 0.5
    alternation_modulus: int = 4
    batch_size: int = 64
    gen_lr: float = 1e-3       # Adam on the generator
    enc_lr: float = 1e-3       # SGD on the backdoor encoder
    seed: int = 0
    val_slice: int = 128
    signal_probe_epochs: int = 100
    # convergence / early-stopping constants
    asr_gate: float = 0.9
    ssim_gate: float = 0.95
    feat_gate: float = 0.1
    stable_eps: float = 0.01
    stable_epochs: int = 10
    plateau_eps: float = 0.005
    plateau_epochs: int = 15
    resource_limit_callback: object = None  # () -> bool; optional early-stop hook

    def __post_init__(self):
        if not 0 < self.phase1_fraction < 1:
            raise ConfigError("phase1_fraction must lie strictly between 0 and 1")
        if self.alternation_modulus < 2:
            raise ConfigError("alternation_modulus must be >= 2")
        for gate in ("asr_gate", "ssim_gate", "feat_gate", "stable_eps", "plateau_eps"):
            if getattr(self, gate) <= 0:
                raise ConfigError(f"{gate} must be positive")

    @property
    def phase1_end(self) -> int:
        return math.ceil(self.total_epochs * self.phase1_fraction)


@dataclass
class TrainState:
    epoch: int = 0
    current_phase: str = PHASE_FOUNDATION
    alternation_counter: int = 0
    weights: WeightState = field(default_factory=WeightState)
    history: dict = field(default_factory=lambda: {"asr": [], "ssim": [], "feature_diff": []})
    phase2_start: int | None = None  # index into history where phase II measurements begin


@dataclass
class TrainResult:
    backdoor_encoder: object
    generator: object
    log: list
    best_checkpoint: dict
    last_checkpoint: dict
    diverged: bool = False


def _trailing_stable(values: list, eps: float, span: int) -> bool:
    """True when the last `span` consecutive changes are all below eps."""
    if len(values) < span + 1:
        return False
    tail = values[-(span + 1):]
    return all(abs(b - a) < eps for a, b in zip(tail[:-1], tail[1:]))


def check_convergence(state: TrainState, cfg: TrainConfig) -> str:
    """Convergence / early-stop decision from phase-II metric histories."""
    if state.phase2_start is None:
        return CONTINUE
    asr = state.history["asr"][state.phase2_start:]
    ssim = state.history["ssim"][state.phase2_start:]
    feat = state.history["feature_diff"][state.phase2_start:]
    if not asr:
        return CONTINUE
    gates = (asr[-1] >= cfg.asr_gate and ssim[-1] >= cfg.ssim_gate
             and feat[-1] <= cfg.feat_gate)
    if gates and all(_trailing_stable(h, cfg.stable_eps, cfg.stable_epochs)
                     for h in (asr, ssim, feat)):
        return CONVERGED
    if _trailing_stable(asr, cfg.plateau_eps, cfg.plateau_epochs):
        return EARLY_STOP
    if cfg.resource_limit_callback is not None and cfg.resource_limit_callback():
        return EARLY_STOP
    return CONTINUE


def _set_trainable(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _snapshot(enc, gen) -> dict:
    return {"encoder": copy.deepcopy(enc.state_dict()),
            "generator": copy.deepcopy(gen.state_dict())}


def _poison_split(batch_pixels: torch.Tensor, rho: float, generator) -> torch.Tensor:
    """Indices of the rho-fraction of the batch selected for poisoning."""
    n = batch_pixels.shape[0]
    k = max(1, min(n, round(rho * n)))
    return torch.randperm(n, generator=generator)[:k]


def _measure_epoch(f_clean, f_bd, gen, taps, data, refs, coeffs, weights, cfg, seed):
    """End-of-epoch measurement pass on fixed validation slices (no gradients)."""
    val_shadow = data.shadow.subset(torch.arange(min(cfg.val_slice, len(data.shadow))))
    val_clean = data.clean.subset(torch.arange(min(cfg.val_slice, len(data.clean))))
    target = refs.target_feature
    with torch.no_grad():
        delta = gen(val_shadow.pixels)
        poisoned = poison_pixels(val_shadow.pixels, delta)
        z_pois = f_bd(poisoned)
        z_clean_bd = f_bd(val_clean.pixels)
        z_clean_ref = f_clean(val_clean.pixels)
        targets = target.unsqueeze(0).expand(len(val_shadow), -1)

        align = L.alignment_loss(z_pois, targets, z_clean_bd, z_clean_ref, coeffs.lambda_clean)
        perc = L.perceptual_loss(val_shadow.pixels, poisoned, taps)
        dist = L.distribution_alignment_loss(z_clean_bd, z_pois,
                                             coeffs.lambda_js, coeffs.lambda_stat)
        aug = light_augment(val_shadow, seed)
        delta_aug = gen(aug.pixels)
        eff = L.effectiveness_loss(z_pois, targets, delta, delta_aug, coeffs)
        ste = L.visual_stealth_loss(val_shadow.pixels, delta, coeffs.alpha_ssim, coeffs.beta_l2)
        cons = L.constraint_loss(delta, coeffs)
        ssim_current = float(compute_ssim(val_shadow.pixels, poisoned))
        feat_bd = torch.nn.functional.normalize(z_clean_bd, dim=1)
        feat_ref = torch.nn.functional.normalize(z_clean_ref, dim=1)
        feature_diff = float((feat_bd - feat_ref).norm(dim=1).mean())
        js = float(L.js_histogram_divergence(z_clean_bd, z_pois))

        # downstream probe on current backdoor features gives the live ASR signal
        probe = train_downstream_probe(f_bd, data.downstream_train,
                                       cfg.signal_probe_epochs, seed=cfg.seed)
        test = data.downstream_test
        test_delta = gen(test.pixels)
        preds = probe.predict(f_bd(poison_pixels(test.pixels, test_delta)))
        asr = float((preds == refs.target_class).float().mean())

    breakdown = L.LossBreakdown(
        align=float(align), perc=float(perc), dist=float(dist),
        eff=float(eff), ste=float(ste), cons=float(cons))
    breakdown.outer = float(L.outer_total(align, perc, dist, weights.outer))
    breakdown.inner = float(L.inner_total(eff, ste, cons, weights.inner))
    signals = ScheduleSignals(asr_current=asr, feature_diff=feature_diff,
                              js_current=js, eff_loss_avg=float(eff),
                              ssim_current=ssim_current)
    return breakdown, signals


def run_attack_training(clean_enc, data: DatasetSplit, refs: ReferenceSet,
                        cfg: TrainConfig, coeffs: L.LossCoefficients | None = None,
                        schedule: PoisonSchedule | None = None,
                        weights: WeightState | None = None,
                        taps: PerceptualTaps | None = None,
                        generator: TriggerGenerator | None = None) -> TrainResult:
    """Train the backdoor encoder and trigger generator per the two-phase
    alternating algorithm; returns final modules, the epoch log, and the
    best/last checkpoints (best ranked by ASR then SSIM)."""
    if refs.target_feature is None:
        raise ValueError("reference set has no target feature; compute it first")
    coeffs = coeffs or L.LossCoefficients()
    schedule = schedule or PoisonSchedule()
    taps = taps or PerceptualTaps(seed=cfg.seed)
    state = TrainState(weights=weights or WeightState(inner_bases=PHASE1_INNER_BASES,
                                                      inner=PHASE1_INNER_BASES))

    torch.manual_seed(cfg.seed)
    f_clean = clean_enc
    f_clean.eval()
    _set_trainable(f_clean, False)
    f_bd = clone_encoder(clean_enc, role="backdoor")
    gen = generator if generator is not None else TriggerGenerator(
        epsilon=coeffs.epsilon, seed=cfg.seed)

    opt_gen = torch.optim.Adam(gen.parameters(), lr=cfg.gen_lr)
    opt_enc = torch.optim.SGD(f_bd.parameters(), lr=cfg.enc_lr)
    rng = torch.Generator().manual_seed(cfg.seed)

    target = refs.target_feature
    log = []
    best_key = (-1.0, -1.0)
    best_ckpt = _snapshot(f_bd, gen)
    diverged = False
    eff_sum, eff_count = 0.0, 0

    for epoch in range(1, cfg.total_epochs + 1):
        state.epoch = epoch
        if epoch <= cfg.phase1_end:
            state.current_phase = PHASE_FOUNDATION
            train_gen = True
            if state.weights.inner_bases != PHASE1_INNER_BASES:
                state.weights = replace(state.weights, inner_bases=PHASE1_INNER_BASES,
                                        inner=PHASE1_INNER_BASES)
        else:
            if state.current_phase == PHASE_FOUNDATION:
                # entering phase II: switch to effectiveness-first inner bases
                state.weights = replace(state.weights, inner_bases=PHASE2_INNER_BASES,
                                        inner=PHASE2_INNER_BASES)
            state.current_phase = PHASE_COOPT
            state.alternation_counter += 1
            if state.alternation_counter % cfg.alternation_modulus != 0:
                train_gen = True
            else:
                train_gen = False
                state.alternation_counter = 0

        _set_trainable(gen, train_gen)
        _set_trainable(f_bd, not train_gen)

        rho = poison_rate_at_epoch(schedule, epoch)
        order = torch.randperm(len(data.shadow), generator=rng)
        clean_cursor = 0
        epoch_eff, epoch_batches = [], 0

        try:
            for start in range(0, len(data.shadow), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                batch = data.shadow.subset(idx)
                pois_idx = _poison_split(batch.pixels, rho, rng)
                x_pois = batch.pixels[pois_idx]
                targets = target.unsqueeze(0).expand(len(pois_idx), -1)

                if train_gen:
                    delta = gen(x_pois)
                    poisoned = poison_pixels(x_pois, delta)
                    z_pois = f_bd(poisoned)
                    aug_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=rng))
                    aug = light_augment(ImageBatch(pixels=x_pois.detach()), aug_seed)
                    delta_aug = gen(aug.pixels)
                    eff = L.effectiveness_loss(z_pois, targets, delta, delta_aug, coeffs)
                    ste = L.visual_stealth_loss(x_pois, delta, coeffs.alpha_ssim, coeffs.beta_l2)
                    cons = L.constraint_loss(delta, coeffs)
                    loss = L.inner_total(eff, ste, cons, state.weights.inner)
                    epoch_eff.append(float(eff))
                    opt = opt_gen
                else:
                    with torch.no_grad():
                        delta = gen(x_pois)
                    poisoned = poison_pixels(x_pois, delta)
                    z_pois = f_bd(poisoned)
                    ncl = min(cfg.batch_size, len(data.clean))
                    if clean_cursor + ncl > len(data.clean):
                        clean_cursor = 0
                    clean_batch = data.clean.subset(
                        torch.arange(clean_cursor, clean_cursor + ncl))
                    clean_cursor += ncl
                    z_clean_bd = f_bd(clean_batch.pixels)
                    with torch.no_grad():
                        z_clean_ref = f_clean(clean_batch.pixels)
                    align = L.alignment_loss(z_pois, targets, z_clean_bd, z_clean_ref,
                                             coeffs.lambda_clean)
                    perc = L.perceptual_loss(x_pois, poisoned, taps)
                    dist = L.distribution_alignment_loss(z_clean_bd, z_pois,
                                                         coeffs.lambda_js, coeffs.lambda_stat)
                    loss = L.outer_total(align, perc, dist, state.weights.outer)
                    opt = opt_enc

                if not torch.isfinite(loss):
                    raise TrainingDivergedError("non-finite training loss", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_batches += 1
        except TrainingDivergedError:
            f_bd.load_state_dict(best_ckpt["encoder"])
            gen.load_state_dict(best_ckpt["generator"])
            diverged = True
            log.append({"epoch": epoch, "phase": state.current_phase, "rho": rho,
                        "diverged": True})
            break

        if epoch_eff:
            eff_sum, eff_count = sum(epoch_eff), len(epoch_eff)

        breakdown, signals = _measure_epoch(f_clean, f_bd, gen, taps, data, refs,
                                            coeffs, state.weights, cfg,
                                            seed=cfg.seed + epoch)
        if eff_count:
            signals.eff_loss_avg = eff_sum / eff_count
        state.weights = update_outer_weights(state.weights, signals)
        state.weights = update_inner_weights(state.weights, signals)

        state.history["asr"].append(signals.asr_current)
        state.history["ssim"].append(signals.ssim_current)
        state.history["feature_diff"].append(signals.feature_diff)
        if state.current_phase == PHASE_COOPT and state.phase2_start is None:
            state.phase2_start = len(state.history["asr"]) - 1

        key = (signals.asr_current, signals.ssim_current)
        if key > best_key:
            best_key = key
            best_ckpt = _snapshot(f_bd, gen)

        decision = CONTINUE
        if state.current_phase == PHASE_COOPT:
            decision = check_convergence(state, cfg)

        log.append({
            "epoch": epoch,
            "phase": state.current_phase,
            "trained": "generator" if train_gen else "encoder",
            "rho": rho,
            "losses": breakdown.to_record(),
            "weights": {"omega": list(state.weights.outer), "mu": list(state.weights.inner)},
            "signals": {"asr": signals.asr_current, "ssim": signals.ssim_current,
                        "feature_diff": signals.feature_diff, "js": signals.js_current,
                        "eff_avg": signals.eff_loss_avg},
            "decision": decision,
        })
        if decision in (CONVERGED, EARLY_STOP):
            break

    return TrainResult(backdoor_encoder=f_bd, generator=gen, log=log,
                       best_checkpoint=best_ckpt, last_checkpoint=_snapshot(f_bd, gen),
                       diverged=diverged)
