"""Dataset loading, light augmentation, reference-input selection, and the
epoch-wise poisoning-rate schedule."""

import math
import os
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataLoadError, InsufficientDataError

# split fractions: shadow 1/2, clean 1/4, downstream train 3/16, downstream test 1/16
SPLIT_FRACTIONS = (8, 4, 3, 1)  # sixteenths


@dataclass
class ImageBatch:
    """A batch of images in [0,1] pixel space with optional labels and stable ids."""

    pixels: torch.Tensor  # [B, C, H, W], float, values in [0, 1]
    labels: torch.Tensor | None = None  # [B] integer class ids
    ids: torch.Tensor | None = None  # [B] stable sample identifiers

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-D [B,C,H,W], got shape {tuple(self.pixels.shape)}")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.ids is None:
            self.ids = torch.arange(self.pixels.shape[0])
        if self.labels is not None and self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("labels length must match batch size")
        if self.ids.shape[0] != self.pixels.shape[0]:
            raise ValueError("ids length must match batch size")

    def __len__(self):
        return self.pixels.shape[0]

    def subset(self, index):
        idx = torch.as_tensor(index, dtype=torch.long)
        return ImageBatch(
            pixels=self.pixels[idx],
            labels=None if self.labels is None else self.labels[idx],
            ids=self.ids[idx],
        )


@dataclass
class DatasetSplit:
    """Disjoint shadow / clean / downstream splits of one dataset."""

    shadow: ImageBatch
    clean: ImageBatch
    downstream_train: ImageBatch
    downstream_test: ImageBatch
    num_classes: int

    def __post_init__(self):
        seen = set()
        for part in (self.shadow, self.clean, self.downstream_train, self.downstream_test):
            part_ids = set(part.ids.tolist())
            if seen & part_ids:
                raise ValueError("dataset splits must be disjoint by sample id")
            seen |= part_ids


@dataclass
class ReferenceSet:
    """Reference inputs for one target class plus their aggregated target feature."""

    target_class: int
    inputs: ImageBatch
    count: int
    target_feature: torch.Tensor | None = None

    def __post_init__(self):
        if self.count != len(self.inputs):
            raise ValueError("count must equal the number of reference inputs")


@dataclass
class PoisonSchedule:
    """Sinusoidal poisoning-rate schedule over epochs."""

    rho_base: float = 0.2
    rho_amp: float = 0.5
    period: int = 20

    def __post_init__(self):
        if not 0 < self.rho_base <= 1:
            raise ConfigError("rho_base must be in (0, 1]")
        if not 0 <= self.rho_amp < 1:
            raise ConfigError("rho_amp must be in [0, 1)")
        if self.period < 1:
            raise ConfigError("period must be a positive integer")
        if self.rho_base * (1 + self.rho_amp) > 1 + 1e-12:
            raise ConfigError("rho_base*(1+rho_amp) must not exceed 1")


@dataclass
class AugmentPolicy:
    """Parameters of the random crop / flip / brightness augmentation."""

    crop_min_area: float = 0.8
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.0
    grayscale_prob: float = 0.0
    identity: bool = False


LIGHT_POLICY = AugmentPolicy()
# SSL pretraining views use stronger distortions than the light policy so that
# triggers trained against the light policy survive it.
SSL_POLICY = AugmentPolicy(crop_min_area=0.2, flip_prob=0.5, brightness=0.4,
                           contrast=0.4, grayscale_prob=0.2)


def poison_rate_at_epoch(sched: PoisonSchedule, epoch: int) -> float:
    """Poisoning rate for a 1-based epoch: rho_base*(1+rho_amp*sin(2*pi*epoch/period)),
    clamped to (0, 1]."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    # reduce the phase mod period so epoch==period yields sin(0) exactly
    phase = 2.0 * math.pi * (epoch % sched.period) / sched.period
    rho = sched.rho_base * (1.0 + sched.rho_amp * math.sin(phase))
    return min(rho, 1.0)


def adjust_brightness(pixels: torch.Tensor, delta: float) -> torch.Tensor:
    """Additive brightness shift, clamped back to [0, 1]."""
    return (pixels + delta).clamp(0.0, 1.0)


def adjust_contrast(pixels: torch.Tensor, factor: float) -> torch.Tensor:
    """Scale deviations from the per-image mean, clamped back to [0, 1]."""
    mean = pixels.mean(dim=(-3, -2, -1), keepdim=True)
    return (mean + (pixels - mean) * factor).clamp(0.0, 1.0)


def _crop_resize(img: torch.Tensor, area: float, ry: float, rx: float) -> torch.Tensor:
    """Crop a centered-area fraction at relative offset (ry, rx) and resize back."""
    _, h, w = img.shape
    side = math.sqrt(area)
    ch = max(1, min(h, round(h * side)))
    cw = max(1, min(w, round(w * side)))
    top = int(round(ry * (h - ch)))
    left = int(round(rx * (w - cw)))
    crop = img[:, top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return crop
    return F.interpolate(crop.unsqueeze(0), size=(h, w), mode="bilinear",
                         align_corners=False).squeeze(0).clamp(0.0, 1.0)


def augment(batch: ImageBatch, seed: int, policy: AugmentPolicy = LIGHT_POLICY) -> ImageBatch:
    """Apply the random crop/flip/brightness policy; deterministic given (batch, seed)."""
    if policy.identity:
        return batch
    gen = torch.Generator().manual_seed(seed)
    n = len(batch)
    areas = torch.empty(n).uniform_(policy.crop_min_area, 1.0, generator=gen)
    offs = torch.rand(n, 2, generator=gen)
    flips = torch.rand(n, generator=gen) < policy.flip_prob
    brights = torch.empty(n).uniform_(-policy.brightness, policy.brightness, generator=gen)
    contrasts = torch.empty(n).uniform_(1.0 - policy.contrast, 1.0 + policy.contrast, generator=gen)
    grays = torch.rand(n, generator=gen) < policy.grayscale_prob

    out = []
    for i in range(n):
        img = _crop_resize(batch.pixels[i], float(areas[i]), float(offs[i, 0]), float(offs[i, 1]))
        if flips[i]:
            img = torch.flip(img, dims=[-1])
        img = adjust_brightness(img, float(brights[i]))
        if policy.contrast > 0:
            img = adjust_contrast(img, float(contrasts[i]))
        if grays[i]:
            img = img.mean(dim=0, keepdim=True).expand_as(img).contiguous()
        out.append(img)
    return ImageBatch(pixels=torch.stack(out), labels=batch.labels, ids=batch.ids)


def light_augment(batch: ImageBatch, seed: int) -> ImageBatch:
    """Light augmentation (crop >=0.8 area, flip p=0.5, brightness +-0.1)."""
    return augment(batch, seed, LIGHT_POLICY)


def _split_sizes(n: int) -> tuple[int, int, int, int]:
    total = sum(SPLIT_FRACTIONS)
    sizes = [n * f // total for f in SPLIT_FRACTIONS]
    sizes[0] += n - sum(sizes)  # remainder goes to the shadow split
    return tuple(sizes)


def _synthetic_gaussian(n: int, size: int, num_classes: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-conditional smooth random fields: a low-frequency prototype per class
    plus per-sample smooth noise and pixel noise."""
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(num_classes):
        grid = rng.normal(size=(3, 4, 4)).astype(np.float32)
        proto = F.interpolate(torch.from_numpy(grid).unsqueeze(0), size=(size, size),
                              mode="bilinear", align_corners=False).squeeze(0)
        proto = 0.5 + 0.35 * proto / proto.abs().max()
        protos.append(proto)
    labels = torch.from_numpy(rng.integers(0, num_classes, size=n)).long()
    images = torch.empty(n, 3, size, size)
    for i in range(n):
        bump = rng.normal(size=(3, 8, 8)).astype(np.float32)
        bump = F.interpolate(torch.from_numpy(bump).unsqueeze(0), size=(size, size),
                             mode="bilinear", align_corners=False).squeeze(0)
        noise = torch.from_numpy(rng.normal(size=(3, size, size)).astype(np.float32))
        images[i] = protos[int(labels[i])] + 0.12 * bump + 0.03 * noise
    return images.clamp(0.0, 1.0), labels


def _load_cifar10(root: str, n: int, size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Read up to n images from a CIFAR-10 python-format archive directory."""
    batch_dir = os.path.join(root, "cifar-10-batches-py")
    if not os.path.isdir(batch_dir):
        raise DataLoadError(f"missing dataset directory: {batch_dir}")
    images, labels = [], []
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        path = os.path.join(batch_dir, name)
        if not os.path.isfile(path):
            continue
        try:
            with open(path, "rb") as fh:
                entry = pickle.load(fh, encoding="bytes")
            images.append(np.asarray(entry[b"data"], dtype=np.uint8))
            labels.append(np.asarray(entry[b"labels"], dtype=np.int64))
        except (OSError, pickle.UnpicklingError, KeyError) as exc:
            raise DataLoadError(f"corrupt dataset file: {path}") from exc
        if sum(len(x) for x in labels) >= n:
            break
    if not images:
        raise DataLoadError(f"no readable data batches under {batch_dir}")
    data = np.concatenate(images)[:n].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    pixels = torch.from_numpy(data)
    if size != 32:
        pixels = F.interpolate(pixels, size=(size, size), mode="bilinear", align_corners=False)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pixels))
    return pixels[order].clamp(0.0, 1.0), torch.from_numpy(np.concatenate(labels)[:n][order])


def load_image_dataset(name: str, root: str = "data", n: int = 512, resize: int = 32,
                       num_classes: int = 10, seed: int = 0) -> DatasetSplit:
    """Load a dataset and partition it into disjoint shadow/clean/downstream splits.

    Supported names: ``synthetic-gaussian`` (no files needed) and
    ``cifar10-subset`` (reads a CIFAR-10 archive under ``root``). Shuffling and
    split membership are deterministic given ``seed``.
    """
    if name == "synthetic-gaussian":
        pixels, labels = _synthetic_gaussian(n, resize, num_classes, seed)
    elif name == "cifar10-subset":
        pixels, labels = _load_cifar10(root, n, resize, seed)
        num_classes = 10
    else:
        raise ConfigError(f"unknown dataset id: {name!r}")

    n = len(pixels)
    ids = torch.arange(n)
    sizes = _split_sizes(n)
    edges = np.cumsum((0,) + sizes)
    parts = []
    for a, b in zip(edges[:-1], edges[1:]):
        parts.append(ImageBatch(pixels=pixels[a:b], labels=labels[a:b], ids=ids[a:b]))
    shadow, clean, dtrain, dtest = parts
    # shadow data is unlabeled from the attacker's point of view
    shadow = ImageBatch(pixels=shadow.pixels, labels=None, ids=shadow.ids)
    return DatasetSplit(shadow=shadow, clean=clean, downstream_train=dtrain,
                        downstream_test=dtest, num_classes=num_classes)


def _feature_variance(feats: torch.Tensor) -> float:
    """Mean per-dimension population variance of a feature matrix."""
    return float(feats.var(dim=0, unbiased=False).mean())


def candidate_scores(feats: torch.Tensor, labels: torch.Tensor, target_class: int) -> torch.Tensor:
    """Score target-class candidates: cosine to own-class centroid minus the
    maximum cosine to any other class centroid."""
    normed = F.normalize(feats, dim=1)
    classes = sorted(set(labels.tolist()))
    centroids = {c: F.normalize(normed[labels == c].mean(dim=0), dim=0) for c in classes}
    own = centroids[target_class]
    others = [c for c in classes if c != target_class]
    mask = labels == target_class
    cand = normed[mask]
    score = cand @ own
    if others:
        other_mat = torch.stack([centroids[c] for c in others])
        score = score - (cand @ other_mat.T).max(dim=1).values
    return score


def select_reference_inputs(target_class: int, candidates: ImageBatch, clean_encoder,
                            theta_low: float | None = None,
                            theta_high: float | None = None) -> ReferenceSet:
    """Pick the top-scoring target-class candidates, sizing the set by the feature
    variance of the provisional top-5: 3 below theta_low, 4 below theta_high, else 5.

    When thresholds are not given they default to the 33rd/66th percentiles of
    intra-class feature variances over all candidate classes.
    """
    if candidates.labels is None:
        raise ValueError("candidates must be labeled")
    with torch.no_grad():
        feats = clean_encoder(candidates.pixels)
    labels = candidates.labels
    n_target = int((labels == target_class).sum())
    if n_target < 3:
        raise InsufficientDataError(
            f"need at least 3 candidates of class {target_class}, got {n_target}")

    if theta_low is None or theta_high is None:
        variances = []
        for c in sorted(set(labels.tolist())):
            class_feats = feats[labels == c]
            if len(class_feats) >= 2:
                variances.append(_feature_variance(class_feats))
        lo, hi = np.percentile(variances, [33, 66]) if variances else (0.0, 0.0)
        theta_low = lo if theta_low is None else theta_low
        theta_high = hi if theta_high is None else theta_high

    scores = candidate_scores(feats, labels, target_class)
    target_idx = torch.nonzero(labels == target_class, as_tuple=True)[0]
    order = target_idx[torch.argsort(scores, descending=True, stable=True)]
    provisional = order[: min(5, n_target)]
    var = _feature_variance(feats[provisional])
    if var < theta_low:
        r = 3
    elif var < theta_high:
        r = 4
    else:
        r = 5
    r = min(r, n_target)
    selected = order[:r]
    refs = ReferenceSet(target_class=target_class, inputs=candidates.subset(selected), count=r)
    compute_target_feature(refs, clean_encoder)
    return refs


def compute_target_feature(refs: ReferenceSet, clean_encoder) -> torch.Tensor:
    """Mean clean-encoder feature over the reference inputs; stored on the set."""
    if len(refs.inputs) == 0:
        raise ValueError("reference set is empty")
    with torch.no_grad():
        feats = clean_encoder(refs.inputs.pixels)
    refs.target_feature = feats.mean(dim=0)
    return refs.target_feature
