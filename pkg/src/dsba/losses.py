"""The six attack losses and the weighted inner/outer objectives.

All functions are pure and differentiable. Cosine terms operate on
L2-normalized rows; histogram-based divergence uses a Gaussian soft
assignment so the whole objective stays smooth.
"""

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import TrainingDivergedError
from .evaluation import compute_ssim
from .models import PerceptualTaps


@dataclass
class LossCoefficients:
    """Fixed scalar hyperparameters of every loss term."""

    lambda_clean: float = 1.0      # clean-feature preservation weight in the alignment loss
    lambda_js: float = 1.0
    lambda_stat: float = 1.0
    lambda_temp: float = 0.5
    lambda_content: float = 1.0
    tau: float = 0.5
    alpha_ssim: float = 1.0
    beta_l2: float = 0.1
    lambda_norm: float = 10.0
    lambda_sm: float = 0.1
    lambda_freq: float = 0.001
    epsilon: float = 8.0 / 255.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    """Named scalar values of each loss term plus the weighted totals."""

    align: float = math.nan
    perc: float = math.nan
    dist: float = math.nan
    eff: float = math.nan
    ste: float = math.nan
    cons: float = math.nan
    outer: float = math.nan
    inner: float = math.nan

    FIELDS = ("align", "perc", "dist", "eff", "ste", "cons", "outer", "inner")

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def _normalize_rows(mat: torch.Tensor, what: str) -> torch.Tensor:
    norms = mat.norm(dim=1)
    bad = torch.nonzero(norms < 1e-12, as_tuple=True)[0]
    if len(bad):
        raise ValueError(f"zero-norm feature row {int(bad[0])} in {what}")
    return mat / norms.unsqueeze(1)


def _row_cosines(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ in {what}: {a.shape[0]} vs {b.shape[0]}")
    return (_normalize_rows(a, what) * _normalize_rows(b, what)).sum(dim=1)


def alignment_loss(backdoor_feats, targets, clean_feats_bd, clean_feats_ref,
                   lambda_clean=1.0) -> torch.Tensor:
    """Dual feature alignment: pull poisoned features toward per-sample targets
    while keeping the backdoor encoder's clean features close to the clean
    encoder's. Returns
    -mean_i cos(bd_i, target_i) - lambda * mean_x cos(f'(x), f(x)).
    """
    attack = _row_cosines(backdoor_feats, targets, "alignment attack term").mean()
    preserve = _row_cosines(clean_feats_bd, clean_feats_ref, "alignment preservation term").mean()
    return -attack - lambda_clean * preserve


def perceptual_loss(x: torch.Tensor, x_poison: torch.Tensor, taps: PerceptualTaps,
                    multiscale: bool = True, min_scaled_size: int = 8) -> torch.Tensor:
    """Tap-feature cosine dissimilarity between the clean and poisoned images,
    optionally accumulated over image scales with the taps' beta weights.

    Scales where the resized image falls below ``min_scaled_size`` are skipped
    with a warning and the remaining beta weights renormalized.
    """
    if x.shape != x_poison.shape:
        raise ValueError("image batches must share a shape")

    def per_scale(a, b):
        feats_a = taps(a)
        feats_b = taps(b)
        total = 0.0
        for alpha, fa, fb in zip(taps.alphas, feats_a, feats_b):
            cos = _row_cosines(fa.flatten(1), fb.flatten(1), "perceptual tap")
            total = total + alpha * (1.0 - cos).mean()
        return total

    if not multiscale:
        return per_scale(x, x_poison)

    h, w = x.shape[-2:]
    usable = [(s, b) for s, b in zip(taps.SCALES, taps.betas)
              if min(int(h * s), int(w * s)) >= min_scaled_size]
    if len(usable) < len(taps.SCALES):
        kept = {s for s, _ in usable}
        warnings.warn(f"perceptual scales skipped for {h}x{w} input: "
                      f"{[s for s in taps.SCALES if s not in kept]}")
    beta_sum = sum(b for _, b in usable)
    total = 0.0
    for scale, beta in usable:
        if scale == 1.0:
            xa, xb = x, x_poison
        else:
            size = (int(h * scale), int(w * scale))
            xa = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            xb = F.interpolate(x_poison, size=size, mode="bilinear", align_corners=False)
        total = total + (beta / beta_sum) * per_scale(xa, xb)
    return total


def _soft_histograms(values: torch.Tensor, centers: torch.Tensor,
                     bandwidth: torch.Tensor) -> torch.Tensor:
    """Gaussian soft assignment per dimension: [B,D] x [D,K] -> probabilities [D,K]."""
    diff = values.unsqueeze(2) - centers.unsqueeze(0)  # [B, D, K]
    weights = torch.exp(-(diff ** 2) / (2.0 * bandwidth.view(1, -1, 1) ** 2))
    weights = weights / weights.sum(dim=2, keepdim=True)
    return weights.mean(dim=0)


def js_histogram_divergence(clean_feats: torch.Tensor, poison_feats: torch.Tensor,
                            bins: int = 32) -> torch.Tensor:
    """Per-dimension soft-histogram Jensen-Shannon divergence, averaged over
    dimensions. Bins span the pooled min/max of both batches; the Gaussian
    bandwidth equals the bin width. Bounded by ln 2."""
    dims = clean_feats.shape[1]
    lo = torch.minimum(clean_feats.min(dim=0).values, poison_feats.min(dim=0).values)
    hi = torch.maximum(clean_feats.max(dim=0).values, poison_feats.max(dim=0).values)
    span = hi - lo
    valid = span > 1e-12  # a constant, equal dimension contributes JS = 0
    safe_span = torch.where(valid, span, torch.ones_like(span))
    grid = torch.linspace(0.0, 1.0, bins, dtype=clean_feats.dtype)
    centers = lo.unsqueeze(1) + safe_span.unsqueeze(1) * grid.unsqueeze(0)  # [D, K]
    bandwidth = safe_span / (bins - 1)
    p = _soft_histograms(clean_feats, centers, bandwidth)
    q = _soft_histograms(poison_feats, centers, bandwidth)
    eps = 1e-12
    m = 0.5 * (p + q)
    kl_pm = (p * torch.log((p + eps) / (m + eps))).sum(dim=1)
    kl_qm = (q * torch.log((q + eps) / (m + eps))).sum(dim=1)
    per_dim = torch.where(valid, 0.5 * kl_pm + 0.5 * kl_qm, torch.zeros_like(kl_pm))
    return per_dim.sum() / dims


def distribution_alignment_loss(clean_feats: torch.Tensor, poison_feats: torch.Tensor,
                                lambda_js=1.0, lambda_stat=1.0, bins: int = 32) -> torch.Tensor:
    """Jensen-Shannon divergence plus squared distances between per-dimension
    batch means and standard deviations."""
    if clean_feats.numel() == 0 or poison_feats.numel() == 0:
        raise ValueError("feature batches must be nonempty")
    if clean_feats.shape[1] != poison_feats.shape[1]:
        raise ValueError("feature dimensions must match")
    if clean_feats.shape[0] < 2 or poison_feats.shape[0] < 2:
        raise ValueError("batch of size 1: variance undefined")
    js = js_histogram_divergence(clean_feats, poison_feats, bins=bins)
    mu_c = clean_feats.mean(dim=0)
    mu_p = poison_feats.mean(dim=0)
    sd_c = clean_feats.std(dim=0, unbiased=False)
    sd_p = poison_feats.std(dim=0, unbiased=False)
    stat = ((mu_c - mu_p) ** 2).sum() + ((sd_c - sd_p) ** 2).sum()
    return lambda_js * js + lambda_stat * stat


def effectiveness_loss(backdoor_feats, targets, trig_orig, trig_aug,
                       coeffs: LossCoefficients, as_printed: bool = False) -> torch.Tensor:
    """Sample-level efficacy: drive each poisoned feature toward its target and
    keep triggers stable under light augmentation.

    Per sample, with S = cos(poisoned feature, target):
    (1 - S) - lambda_temp * exp(-(1 - S)/tau) + lambda_content * ||g_orig - g_aug||^2.
    ``as_printed`` flips to the sign variant that negates the first two terms and
    subtracts the content term (kept for reproduction studies).
    """
    s = _row_cosines(backdoor_feats, targets, "effectiveness loss")
    one_minus = 1.0 - s
    temp_term = coeffs.lambda_temp * torch.exp(-one_minus / coeffs.tau)
    content = coeffs.lambda_content * ((trig_orig - trig_aug) ** 2).flatten(1).sum(dim=1)
    if as_printed:
        per_sample = -(one_minus + temp_term) - content
    else:
        per_sample = one_minus - temp_term + content
    return per_sample.mean()


def visual_stealth_loss(x: torch.Tensor, delta: torch.Tensor,
                        alpha_ssim=1.0, beta_l2=0.1) -> torch.Tensor:
    """alpha*(1 - SSIM(x, clamp(x+delta))) + beta * mean_i ||delta_i||_2^2."""
    if x.shape != delta.shape:
        raise ValueError("delta shape must match the image batch")
    poisoned = (x + delta).clamp(0.0, 1.0)
    ssim = compute_ssim(x, poisoned)
    sq_norms = (delta ** 2).flatten(1).sum(dim=1)
    return alpha_ssim * (1.0 - ssim) + beta_l2 * sq_norms.mean()


def total_variation(delta: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV per sample: sum of absolute neighbor differences."""
    dh = (delta[..., 1:, :] - delta[..., :-1, :]).abs().flatten(1).sum(dim=1)
    dw = (delta[..., :, 1:] - delta[..., :, :-1]).abs().flatten(1).sum(dim=1)
    return dh + dw


def constraint_loss(delta: torch.Tensor, coeffs: LossCoefficients) -> torch.Tensor:
    """Budget hinge + spatial smoothness + frequency sparsity:
    mean_i [ lambda_norm*max(0, ||d_i||_inf - eps) + lambda_sm*TV(d_i)
             + lambda_freq*||DFT(d_i)||_1 ].

    The DFT is the unnormalized 2-D transform per channel, so a constant field c
    contributes exactly |c|*H*W per channel (DC bin only).
    """
    inf_norms = delta.abs().flatten(1).max(dim=1).values
    hinge = F.relu(inf_norms - coeffs.epsilon)
    tv = total_variation(delta)
    freq = torch.abs(torch.fft.fft2(delta)).flatten(1).sum(dim=1)
    per_sample = coeffs.lambda_norm * hinge + coeffs.lambda_sm * tv + coeffs.lambda_freq * freq
    return per_sample.mean()


def _check_finite(value, name):
    finite = torch.isfinite(value) if torch.is_tensor(value) else math.isfinite(value)
    if not finite:
        raise TrainingDivergedError(f"non-finite loss component: {name}")


def outer_total(align, perc, dist, omega) -> torch.Tensor:
    """omega_1*L_align + omega_2*L_perc + omega_3*L_dist."""
    for name, value in (("align", align), ("perc", perc), ("dist", dist)):
        _check_finite(value, name)
    return omega[0] * align + omega[1] * perc + omega[2] * dist


def inner_total(eff, ste, cons, mu) -> torch.Tensor:
    """mu_1*L_eff + mu_2*L_ste + mu_3*L_cons."""
    for name, value in (("eff", eff), ("ste", ste), ("cons", cons)):
        _check_finite(value, name)
    return mu[0] * eff + mu[1] * ste + mu[2] * cons
