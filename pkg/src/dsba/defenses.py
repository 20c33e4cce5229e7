"""Defense-resistance harness: STRIP entropy detection, a latent-space
separability probe, and a lightweight trigger-inversion anomaly index."""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score, silhouette_score
from sklearn.model_selection import StratifiedKFold

from .data import ImageBatch

MAD_FLOOR = 1e-6


@dataclass
class DefenseReport:
    """Scores from every defense applied to one (encoder, classifier) pair."""

    strip_clean_entropy: dict = field(default_factory=dict)
    strip_poison_entropy: dict = field(default_factory=dict)
    strip_auroc: float = 0.5
    separability_auroc: float = 0.5
    silhouette: float = 0.0
    nc_class_norms: list = field(default_factory=list)
    nc_anomaly_index: float = 0.0

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _entropy_stats(entropies: np.ndarray) -> dict:
    return {"mean": float(entropies.mean()), "std": float(entropies.std()),
            "min": float(entropies.min()), "max": float(entropies.max())}


def strip_entropies(classifier, enc, samples: ImageBatch, clean_pool: ImageBatch,
                    n_overlays: int = 64, seed: int = 0) -> np.ndarray:
    """Mean prediction entropy of each sample under random clean-image overlays.

    Each sample is blended 0.5/0.5 with ``n_overlays`` images drawn from the
    clean pool; entropy is -sum p*ln(p) over classifier probabilities.
    """
    if n_overlays < 8:
        raise ValueError("n_overlays must be >= 8")
    if len(clean_pool) == 0:
        raise ValueError("clean pool is empty")
    rng = torch.Generator().manual_seed(seed)
    out = np.zeros(len(samples))
    with torch.no_grad():
        for i in range(len(samples)):
            overlay_idx = torch.randint(0, len(clean_pool), (n_overlays,), generator=rng)
            blended = 0.5 * samples.pixels[i:i + 1] + 0.5 * clean_pool.pixels[overlay_idx]
            probs = classifier.predict_proba(enc(blended))
            ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=1)
            out[i] = float(ent.mean())
    return out


def strip_entropy_test(classifier, enc, clean_samples: ImageBatch,
                       poisoned_samples: ImageBatch, clean_pool: ImageBatch,
                       n_overlays: int = 64, seed: int = 0):
    """(clean entropies, poisoned entropies, AUROC).

    AUROC scores how well low overlay entropy flags poisoned samples; 0.5 means
    the populations are indistinguishable (the attack evades STRIP).
    """
    clean_ent = strip_entropies(classifier, enc, clean_samples, clean_pool, n_overlays, seed)
    pois_ent = strip_entropies(classifier, enc, poisoned_samples, clean_pool, n_overlays, seed)
    labels = np.concatenate([np.zeros(len(clean_ent)), np.ones(len(pois_ent))])
    scores = -np.concatenate([clean_ent, pois_ent])  # low entropy => suspicious
    auroc = float(roc_auc_score(labels, scores))
    return clean_ent, pois_ent, auroc


def latent_separability_score(enc, clean: ImageBatch, poisoned: ImageBatch,
                              seed: int = 0, plot_path: str | None = None):
    """(cross-validated probe AUROC, 2-means silhouette after 2-component PCA)
    for distinguishing clean from poisoned features."""
    if len(clean) < 16 or len(poisoned) < 16:
        raise ValueError("need at least 16 samples per side")
    with torch.no_grad():
        feats = torch.cat([enc(clean.pixels), enc(poisoned.pixels)]).numpy()
    if np.allclose(feats.var(axis=0), 0):
        raise ValueError("degenerate features: zero variance everywhere")
    labels = np.concatenate([np.zeros(len(clean)), np.ones(len(poisoned))])

    folds = StratifiedKFold(n_splits=5, shuffle=True, random_state=seed)
    aurocs = []
    for train_idx, test_idx in folds.split(feats, labels):
        clf = LogisticRegression(max_iter=500, random_state=seed)
        clf.fit(feats[train_idx], labels[train_idx])
        scores = clf.predict_proba(feats[test_idx])[:, 1]
        aurocs.append(roc_auc_score(labels[test_idx], scores))
    probe_auroc = float(np.mean(aurocs))

    projected = PCA(n_components=2, random_state=seed).fit_transform(feats)
    clusters = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(projected)
    sil = float(silhouette_score(projected, clusters))

    if plot_path is not None:
        _plot_pca_scatter(projected, labels, plot_path)
    return probe_auroc, sil


def _plot_pca_scatter(projected, labels, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for value, name, color in ((0, "clean", "tab:blue"), (1, "poisoned", "tab:red")):
        mask = labels == value
        ax.scatter(projected[mask, 0], projected[mask, 1], s=12, alpha=0.6,
                   label=name, color=color)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def anomaly_index_from_norms(norms) -> float:
    """MAD-normalized deviation of the smallest norm from the median."""
    arr = np.asarray(norms, dtype=np.float64)
    median = float(np.median(arr))
    mad = float(np.median(np.abs(arr - median)))
    mad = max(mad, MAD_FLOOR)
    return abs(median - float(arr.min())) / (1.4826 * mad)


def invert_trigger(classifier, enc, pixels: torch.Tensor, target_class: int,
                   steps: int = 200, lam: float = 0.01, lr: float = 0.1,
                   seed: int = 0) -> float:
    """Optimize a static mask+pattern steering all inputs to ``target_class``;
    returns the final L1 norm of the mask."""
    h, w = pixels.shape[-2:]
    channels = pixels.shape[1]
    torch.manual_seed(seed)
    mask_logit = torch.full((1, 1, h, w), -2.0, requires_grad=True)
    pattern_logit = torch.zeros((1, channels, h, w), requires_grad=True)
    opt = torch.optim.Adam([mask_logit, pattern_logit], lr=lr)
    target = torch.full((pixels.shape[0],), target_class, dtype=torch.long)
    budget_cap = float(h * w)
    for _ in range(steps):
        mask = torch.sigmoid(mask_logit)
        pattern = torch.sigmoid(pattern_logit)
        stamped = (1 - mask) * pixels + mask * pattern
        logits = classifier(enc(stamped))
        loss = F.cross_entropy(logits, target) + lam * mask.abs().sum()
        if not torch.isfinite(loss):
            warnings.warn(f"trigger inversion diverged for class {target_class}; "
                          "recording the budget cap")
            return budget_cap
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(torch.sigmoid(mask_logit).abs().sum())


def nc_anomaly_index(classifier, enc, data: ImageBatch, num_classes: int,
                     steps: int = 200, lam: float = 0.01, seed: int = 0):
    """(per-class inverted-trigger L1 norms, anomaly index).

    Inversion runs per class over the held-out images; the index is the
    MAD-based deviation of the smallest norm. Values above 2 indicate a
    reconstructible (detectable) backdoor.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    norms = [invert_trigger(classifier, enc, data.pixels, c, steps=steps,
                            lam=lam, seed=seed) for c in range(num_classes)]
    return norms, anomaly_index_from_norms(norms)
