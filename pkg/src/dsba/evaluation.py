"""Downstream probe training, CA/BA/ASR computation, and the stealth metric
suite (SSIM, PSNR, LPIPS proxy, FSIM, FID)."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch
from .models import PerceptualTaps, apply_trigger, generate_trigger


# ---------------------------------------------------------------------------
# pixel-space metrics


def compute_ssim(x: torch.Tensor, y: torch.Tensor, window=7, k1=0.01, k2=0.03,
                 data_range=1.0) -> torch.Tensor:
    """Mean SSIM over sliding windows, averaged over channels and batch.

    Differentiable; uses a uniform box window and the standard stabilization
    constants C1=(k1*L)^2, C2=(k2*L)^2.
    """
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    channels = x.shape[1]
    kernel = torch.ones(channels, 1, window, window, dtype=x.dtype) / (window * window)

    def filt(t):
        return F.conv2d(t, kernel, groups=channels)

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return ssim_map.mean()


def compute_psnr(x: torch.Tensor, y: torch.Tensor, max_value=1.0) -> float:
    """10*log10(MAX^2 / MSE); returns +inf when the images are identical."""
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


# ---------------------------------------------------------------------------
# FSIM: phase congruency (log-Gabor, 3 scales, 4 orientations) + gradients


def _log_gabor_bank(h, w, n_scales=3, n_orient=4, min_wavelength=6.0,
                    mult=2.0, sigma_f=0.65, dtheta_on_sigma=1.3):
    """Frequency-domain log-Gabor filters, one per (scale, orientation)."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0  # avoid log(0); DC is zeroed below
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    theta_sigma = math.pi / n_orient / dtheta_on_sigma

    bank = np.zeros((n_scales, n_orient, h, w))
    for s in range(n_scales):
        f0 = 1.0 / (min_wavelength * mult**s)
        radial = np.exp(-(np.log(radius / f0) ** 2) / (2 * math.log(sigma_f) ** 2))
        radial[0, 0] = 0.0
        for o in range(n_orient):
            angle = o * math.pi / n_orient
            ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
            dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
            dtheta = np.abs(np.arctan2(ds, dc))
            spread = np.exp(-(dtheta ** 2) / (2 * theta_sigma ** 2))
            bank[s, o] = radial * spread
    return bank


_GABOR_CACHE: dict = {}


def _phase_congruency(gray: np.ndarray) -> np.ndarray:
    """Classic log-Gabor phase congruency map in [0, 1]."""
    h, w = gray.shape
    key = (h, w)
    if key not in _GABOR_CACHE:
        _GABOR_CACHE[key] = _log_gabor_bank(h, w)
    bank = _GABOR_CACHE[key]
    spectrum = np.fft.fft2(gray)
    energy_total = np.zeros((h, w))
    amplitude_total = np.zeros((h, w))
    eps = 1e-8
    for o in range(bank.shape[1]):
        sum_re = np.zeros((h, w))
        sum_im = np.zeros((h, w))
        for s in range(bank.shape[0]):
            response = np.fft.ifft2(spectrum * bank[s, o])
            sum_re += response.real
            sum_im += response.imag
            amplitude_total += np.abs(response)
        energy_total += np.sqrt(sum_re**2 + sum_im**2)
    return np.clip(energy_total / (amplitude_total + eps), 0.0, 1.0)


def _gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    """Scharr gradient magnitude."""
    kx = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16.0
    ky = kx.T
    pad = np.pad(gray, 1, mode="reflect")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for dy in range(3):
        for dx in range(3):
            patch = pad[dy:dy + gray.shape[0], dx:dx + gray.shape[1]]
            gx += kx[dy, dx] * patch
            gy += ky[dy, dx] * patch
    return np.sqrt(gx * gx + gy * gy)


def _luminance(pixels: torch.Tensor) -> np.ndarray:
    """[B,C,H,W] in [0,1] -> [B,H,W] luminance scaled to [0,255]."""
    arr = pixels.detach().cpu().numpy().astype(np.float64)
    if arr.shape[1] == 3:
        lum = 0.299 * arr[:, 0] + 0.587 * arr[:, 1] + 0.114 * arr[:, 2]
    else:
        lum = arr.mean(axis=1)
    return lum * 255.0


def compute_fsim(x: torch.Tensor, y: torch.Tensor, t1=0.85, t2=160.0) -> float:
    """Feature similarity from phase congruency and gradient magnitude maps."""
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    lx, ly = _luminance(x), _luminance(y)
    scores = []
    for i in range(lx.shape[0]):
        pc1, pc2 = _phase_congruency(lx[i]), _phase_congruency(ly[i])
        g1, g2 = _gradient_magnitude(lx[i]), _gradient_magnitude(ly[i])
        s_pc = (2 * pc1 * pc2 + t1) / (pc1**2 + pc2**2 + t1)
        s_g = (2 * g1 * g2 + t2) / (g1**2 + g2**2 + t2)
        s_l = s_pc * s_g
        pc_max = np.maximum(pc1, pc2)
        denom = pc_max.sum()
        if denom < 1e-12:
            scores.append(float(s_l.mean()))  # featureless images: unweighted mean
        else:
            scores.append(float((s_l * pc_max).sum() / denom))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# deep-feature metrics over the fixed tap network


def lpips_proxy(x: torch.Tensor, y: torch.Tensor, taps: PerceptualTaps) -> float:
    """Mean over taps of spatially-averaged squared differences of
    channel-unit-normalized tap features (uncalibrated LPIPS stand-in)."""
    with torch.no_grad():
        feats_x = taps(x)
        feats_y = taps(y)
    dists = []
    for fx, fy in zip(feats_x, feats_y):
        nx = F.normalize(fx, dim=1, eps=1e-10)
        ny = F.normalize(fy, dim=1, eps=1e-10)
        dists.append(((nx - ny) ** 2).sum(dim=1).mean(dim=(1, 2)))
    return float(torch.stack(dists).mean())


def _pooled_tap_features(pixels: torch.Tensor, taps: PerceptualTaps) -> np.ndarray:
    with torch.no_grad():
        final = taps(pixels)[-1]
    return final.mean(dim=(2, 3)).cpu().numpy().astype(np.float64)


def compute_fid(x: torch.Tensor, y: torch.Tensor, taps: PerceptualTaps,
                diag_reg=1e-6) -> float:
    """Frechet distance between tap-feature Gaussians of the two image sets."""
    fx = _pooled_tap_features(x, taps)
    fy = _pooled_tap_features(y, taps)
    if len(fx) < 2 or len(fy) < 2:
        raise ValueError("FID needs at least 2 samples per side")
    mu_x, mu_y = fx.mean(axis=0), fy.mean(axis=0)
    cov_x = np.cov(fx, rowvar=False) + diag_reg * np.eye(fx.shape[1])
    cov_y = np.cov(fy, rowvar=False) + diag_reg * np.eye(fy.shape[1])
    covmean = scipy.linalg.sqrtm(cov_x @ cov_y)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    fid = float(np.sum((mu_x - mu_y) ** 2) + np.trace(cov_x + cov_y - 2.0 * covmean))
    return max(fid, 0.0)


def compute_stealth_suite(x: ImageBatch, y: ImageBatch, taps: PerceptualTaps) -> tuple[float, float, float]:
    """(lpips_proxy, fsim, fid) between two image batches."""
    if len(x) == 0 or len(y) == 0:
        raise ValueError("batches must be nonempty")
    lp = lpips_proxy(x.pixels, y.pixels, taps)
    fs = compute_fsim(x.pixels, y.pixels)
    fd = compute_fid(x.pixels, y.pixels, taps)
    return lp, fs, fd


# ---------------------------------------------------------------------------
# downstream probe and attack metrics


class LinearProbe(nn.Module):
    """Linear classifier over frozen encoder features."""

    def __init__(self, feature_dim, num_classes, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.linear = nn.Linear(feature_dim, num_classes)

    def forward(self, feats):
        return self.linear(feats)

    def predict(self, feats):
        return self.forward(feats).argmax(dim=1)

    def predict_proba(self, feats):
        return F.softmax(self.forward(feats), dim=1)


def train_downstream_probe(enc: nn.Module, labeled: ImageBatch, epochs: int,
                           seed: int = 0, lr: float = 0.05,
                           num_classes: int | None = None) -> LinearProbe:
    """Train a linear probe on frozen encoder features with cross-entropy."""
    if labeled.labels is None or len(labeled) == 0:
        raise ValueError("labeled data required")
    distinct = sorted(set(labeled.labels.tolist()))
    if len(distinct) < 2:
        raise ValueError("degenerate labels: need at least 2 classes")
    if num_classes is None:
        num_classes = max(distinct) + 1
    with torch.no_grad():
        feats = enc(labeled.pixels)
    probe = LinearProbe(feats.shape[1], num_classes, seed=seed)
    if epochs == 0:
        return probe
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    targets = labeled.labels
    for _ in range(epochs):
        loss = F.cross_entropy(probe(feats), targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return probe


def probe_accuracy(probe: LinearProbe, enc: nn.Module, batch: ImageBatch) -> float:
    with torch.no_grad():
        preds = probe.predict(enc(batch.pixels))
    return float((preds == batch.labels).float().mean())


def evaluate_attack(clean_enc, backdoor_enc, gen, refs, train: ImageBatch,
                    test: ImageBatch, probe_epochs=200, seed=0) -> tuple[float, float, float]:
    """(CA, BA, ASR) in percent.

    CA: clean probe on the clean encoder, clean test images. BA: probe on the
    backdoor encoder, clean test images. ASR: fraction of trigger-embedded test
    images the backdoor probe assigns to the target class.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    clean_probe = train_downstream_probe(clean_enc, train, probe_epochs, seed=seed)
    bd_probe = train_downstream_probe(backdoor_enc, train, probe_epochs, seed=seed)
    ca = 100.0 * probe_accuracy(clean_probe, clean_enc, test)
    ba = 100.0 * probe_accuracy(bd_probe, backdoor_enc, test)
    with torch.no_grad():
        delta = generate_trigger(gen, test)
        triggered = apply_trigger(test, delta)
        preds = bd_probe.predict(backdoor_enc(triggered.pixels))
    asr = 100.0 * float((preds == refs.target_class).float().mean())
    return ca, ba, asr


# ---------------------------------------------------------------------------
# report container


@dataclass
class MetricsReport:
    """All attack-effectiveness, stealth, and defense scores for one run."""

    ca: float = 0.0
    ba: float = 0.0
    asr: float = 0.0
    ssim: float = 0.0
    psnr: float = 0.0
    lpips: float = 0.0
    fsim: float = 0.0
    fid: float = 0.0
    strip_auroc: float | None = None
    separability_auroc: float | None = None
    nc_anomaly_index: float | None = None
    metadata: dict = field(default_factory=dict)

    def validate(self):
        for name in ("ca", "ba", "asr"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be a percentage, got {v}")
        if not 0 <= self.ssim <= 1 or not 0 <= self.fsim <= 1:
            raise ValueError("ssim/fsim must lie in [0, 1]")
        if self.fid < 0:
            raise ValueError("fid must be nonnegative")
        return self

    def to_text(self) -> str:
        payload = {k: v for k, v in self.__dict__.items()}
        payload["psnr"] = "inf" if math.isinf(self.psnr) else self.psnr
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        if payload.get("psnr") == "inf":
            payload["psnr"] = math.inf
        return cls(**payload)
