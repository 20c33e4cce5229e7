"""Performance-driven adaptive loss-weight scheduling.

Sigmoid-gated multiplicative updates around fixed base weights, momentum
smoothing for the outer triple, clamping to [0.01, 10.0], and normalization of
each weight group to sum 1.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

from .errors import ConfigError

CLAMP_LO = 0.01
CLAMP_HI = 10.0

MAXIMIZE_METRICS = frozenset({"ssim", "fsim", "psnr"})
MINIMIZE_METRICS = frozenset({"lpips", "fid"})


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class WeightState:
    """Live adaptive weights plus their bases, rates, and momentum memory.

    ``outer``/``inner`` are the normalized triples actually applied to the
    losses; ``outer_momentum`` carries the smoothed pre-clamp values between
    updates. ``disabled_outer``/``disabled_inner`` pin ablated components to 0.
    """

    outer: tuple = (0.5, 0.3, 0.2)
    inner: tuple = (0.3, 0.5, 0.2)
    outer_bases: tuple = (0.5, 0.3, 0.2)
    inner_bases: tuple = (0.3, 0.5, 0.2)
    eta_attack: float = 0.01
    eta_preserve: float = 0.01
    eta_dist: float = 0.01
    eta_inner: float = 0.01
    eta_align: float = 0.01  # recorded alongside eta_attack; the attack rate drives omega_1
    alpha_momentum: float = 0.9
    outer_momentum: tuple | None = None
    flip_distribution_gate: bool = False
    disabled_outer: tuple = ()
    disabled_inner: tuple = ()

    def __post_init__(self):
        if not 0 <= self.alpha_momentum < 1:
            raise ConfigError("momentum coefficient must lie in [0, 1)")
        if self.outer_momentum is None:
            object.__setattr__(self, "outer_momentum", self.outer_bases)


@dataclass
class ScheduleSignals:
    """Epoch-aggregate performance signals that drive the weight updates."""

    asr_current: float = 0.0
    asr_target: float = 0.95
    feature_diff: float = 0.0
    delta_preserve: float = 0.1
    js_current: float = 0.0
    d_threshold: float = 0.05
    eff_loss_avg: float = 0.0
    eff_loss_target: float = 0.1
    ssim_current: float = 1.0
    ssim_target: float = 0.9
    tau_asr: float = 0.1
    training_progress: float = 0.0

    def __post_init__(self):
        for name in ("asr_target", "delta_preserve", "d_threshold",
                     "eff_loss_target", "ssim_target", "tau_asr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.training_progress <= 1:
            raise ConfigError("training_progress must lie in [0, 1]")


def _clamp(v: float) -> float:
    return min(max(v, CLAMP_LO), CLAMP_HI)


def _normalize(values: list, disabled: tuple) -> tuple:
    total = sum(values)
    if total <= 0:
        # all components disabled or zero; spread uniformly over enabled ones
        enabled = [i for i in range(len(values)) if i not in disabled]
        return tuple(1.0 / len(enabled) if i in enabled else 0.0 for i in range(len(values)))
    return tuple(v / total for v in values)


def raw_outer_targets(state: WeightState, sig: ScheduleSignals) -> tuple:
    """Sigmoid-gated raw targets before momentum/clamp/normalization."""
    b1, b2, b3 = state.outer_bases
    w1 = b1 * (1.0 + state.eta_attack * sigmoid((sig.asr_target - sig.asr_current) / sig.tau_asr))
    w2 = b2 * (1.0 + state.eta_preserve * sigmoid(
        (sig.feature_diff - sig.delta_preserve) / sig.delta_preserve))
    gate = (sig.d_threshold - sig.js_current) / sig.d_threshold
    if state.flip_distribution_gate:
        gate = -gate
    w3 = b3 * (1.0 + state.eta_dist * sigmoid(gate))
    return (w1, w2, w3)


def update_outer_weights(state: WeightState, sig: ScheduleSignals) -> WeightState:
    """New state with momentum-smoothed, clamped, normalized outer weights."""
    raw = raw_outer_targets(state, sig)
    a = state.alpha_momentum
    momentum = tuple(a * prev + (1.0 - a) * new
                     for prev, new in zip(state.outer_momentum, raw))
    clamped = [0.0 if i in state.disabled_outer else _clamp(m)
               for i, m in enumerate(momentum)]
    return replace(state, outer=_normalize(clamped, state.disabled_outer),
                   outer_momentum=momentum)


def raw_inner_targets(state: WeightState, sig: ScheduleSignals) -> tuple:
    b1, b2, b3 = state.inner_bases
    m1 = b1 * (1.0 + state.eta_inner * sigmoid(
        (sig.eff_loss_avg - sig.eff_loss_target) / sig.eff_loss_target))
    m2 = b2 * (1.0 + state.eta_inner * sigmoid(
        (sig.ssim_target - sig.ssim_current) / sig.ssim_target))
    return (m1, m2, b3)  # the constraint weight has no update rule; held at base


def update_inner_weights(state: WeightState, sig: ScheduleSignals) -> WeightState:
    """New state with clamped, normalized inner weights (no momentum)."""
    raw = raw_inner_targets(state, sig)
    clamped = [0.0 if i in state.disabled_inner else _clamp(v)
               for i, v in enumerate(raw)]
    return replace(state, inner=_normalize(clamped, state.disabled_inner))


def schedule_stealth_weights(metric_values: dict, thresholds: dict,
                             training_progress: float) -> dict:
    """Per-metric stealth weights: ratio-scaled when a metric misses its
    threshold, boosted by a progress factor, clamped to [0.01, 10.0]."""
    if not 0 <= training_progress <= 1:
        raise ConfigError("training_progress must lie in [0, 1]")
    progress_factor = 1.0 + training_progress * 0.5
    weights = {}
    for name, value in metric_values.items():
        threshold = thresholds[name]
        if name in MAXIMIZE_METRICS:
            if value <= 0:
                warnings.warn(f"metric {name} is nonpositive; clamping weight to {CLAMP_HI}")
                weights[name] = CLAMP_HI
                continue
            ratio = threshold / value if value < threshold else 1.0
        elif name in MINIMIZE_METRICS:
            ratio = value / threshold if value > threshold else 1.0
        else:
            raise ConfigError(f"unknown stealth metric: {name!r}")
        weights[name] = _clamp(ratio * progress_factor)
    return weights
