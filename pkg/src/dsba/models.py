"""Clean/backdoor encoders, the conditional trigger generator, the fixed
perceptual tap network, and contrastive pretraining."""

import copy
import hashlib
import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SSL_POLICY, DatasetSplit, ImageBatch, augment
from .errors import TrainingDivergedError


def _conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(8, c_out),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """Small convolutional encoder: 4 conv blocks + pooling -> feature vector.

    GroupNorm keeps the forward pass per-sample deterministic (no batch statistics),
    which the freeze/determinism contracts rely on.
    """

    def __init__(self, feature_dim=128, width=32, in_channels=3, role="clean", seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.feature_dim = feature_dim
        self.in_channels = in_channels
        self.role = role
        self.arch = f"conv4-w{width}-d{feature_dim}"
        self.blocks = nn.Sequential(
            _conv_block(in_channels, width, stride=1),
            _conv_block(width, width * 2, stride=2),
            _conv_block(width * 2, width * 4, stride=2),
            _conv_block(width * 4, width * 4, stride=2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(width * 4, feature_dim)

    def forward(self, x):
        h = self.blocks(x)
        h = self.pool(h).flatten(1)
        return self.head(h)


class ProjectionHead(nn.Module):
    """Two-layer MLP used only during contrastive pretraining."""

    def __init__(self, feature_dim, hidden=128, out_dim=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class TriggerGenerator(nn.Module):
    """Encoder-decoder image-to-image network with a skip connection.

    The output is tanh-scaled to [-2*epsilon, 2*epsilon]; the soft budget epsilon
    itself is enforced by the constraint loss, not here.
    """

    def __init__(self, epsilon=8 / 255, width=16, in_channels=3, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.epsilon = epsilon
        self.enc1 = _conv_block(in_channels, width)
        self.enc2 = _conv_block(width, width * 2, stride=2)
        self.mid = _conv_block(width * 2, width * 2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec1 = _conv_block(width * 2, width)
        self.dec2 = _conv_block(width * 2, width)  # takes cat(dec1, enc1 skip)
        self.out = nn.Conv2d(width, in_channels, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        m = self.mid(e2)
        d = self.dec1(self.up(m))
        d = self.dec2(torch.cat([d, e1], dim=1))
        return torch.tanh(self.out(d)) * (2.0 * self.epsilon)


class PerceptualTaps(nn.Module):
    """Fixed random conv feature network with taps after each block.

    alpha_l weight the taps (sum 1) and beta_s weight the image scales (sum 1);
    all weights are frozen for the entire run.
    """

    SCALES = (1.0, 0.5, 0.25)

    def __init__(self, width=16, in_channels=3, seed=0,
                 alphas=None, betas=None):
        super().__init__()
        torch.manual_seed(seed)
        chans = [width, width * 2, width * 4, width * 4]
        blocks, c_prev = [], in_channels
        for c in chans:
            blocks.append(_conv_block(c_prev, c, stride=2))
            c_prev = c
        self.taps = nn.ModuleList(blocks)
        self.alphas = tuple(alphas) if alphas is not None else tuple([1.0 / len(chans)] * len(chans))
        self.betas = tuple(betas) if betas is not None else (0.5, 0.3, 0.2)
        if any(a <= 0 for a in self.alphas) or abs(sum(self.alphas) - 1.0) > 1e-6:
            raise ValueError("tap weights must be positive and sum to 1")
        if any(b <= 0 for b in self.betas) or abs(sum(self.betas) - 1.0) > 1e-6:
            raise ValueError("scale weights must be positive and sum to 1")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        h = x
        for block in self.taps:
            h = block(h)
            feats.append(h)
        return feats


def clone_encoder(enc: ConvEncoder, role="backdoor") -> ConvEncoder:
    """Exact copy of an encoder (the backdoor encoder starts equal to the clean one)."""
    twin = copy.deepcopy(enc)
    twin.role = role
    return twin


def encode(enc: nn.Module, batch: ImageBatch) -> torch.Tensor:
    """One feature vector per sample; differentiable w.r.t. weights and pixels."""
    expected = getattr(enc, "in_channels", None)
    if expected is not None and batch.pixels.shape[1] != expected:
        raise ValueError(f"encoder expects {expected} channels, "
                         f"got {batch.pixels.shape[1]}")
    return enc(batch.pixels)


def generate_trigger(gen: TriggerGenerator, batch: ImageBatch) -> torch.Tensor:
    """Per-sample perturbations with |delta| <= 2*epsilon elementwise."""
    return gen(batch.pixels)


def apply_trigger(batch: ImageBatch, delta: torch.Tensor) -> ImageBatch:
    """clamp(x + delta, 0, 1)."""
    if delta.shape != batch.pixels.shape:
        raise ValueError(f"delta shape {tuple(delta.shape)} does not match "
                         f"batch shape {tuple(batch.pixels.shape)}")
    return ImageBatch(pixels=(batch.pixels + delta).clamp(0.0, 1.0),
                      labels=batch.labels, ids=batch.ids)


def poison_pixels(pixels: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Tensor-level apply_trigger that keeps the autograd graph."""
    return (pixels + delta).clamp(0.0, 1.0)


def nt_xent_loss(z1: torch.Tensor, z2: torch.Tensor, temperature=0.5) -> torch.Tensor:
    """Normalized-temperature cross-entropy over in-batch negatives (two views)."""
    n = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def pretrain_clean_encoder(data: DatasetSplit, epochs: int, seed: int = 0,
                           feature_dim=128, width=32, batch_size=256,
                           lr=1e-3, temperature=0.5) -> ConvEncoder:
    """SimCLR-style contrastive pretraining of the clean encoder.

    Two augmented views per image, NT-Xent over in-batch negatives, a two-layer
    projection head that is discarded afterwards. Deterministic given the seed.
    """
    torch.manual_seed(seed)
    enc = ConvEncoder(feature_dim=feature_dim, width=width, role="clean", seed=seed)
    if epochs == 0:
        return enc
    head = ProjectionHead(feature_dim)
    opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=lr)
    pool = ImageBatch(
        pixels=torch.cat([data.shadow.pixels, data.clean.pixels]),
        ids=torch.cat([data.shadow.ids, data.clean.ids]))
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(pool), generator=gen)
        for start in range(0, len(pool), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 4:
                continue
            views = pool.subset(idx)
            aug_seed_a = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
            aug_seed_b = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
            v1 = augment(views, aug_seed_a, SSL_POLICY)
            v2 = augment(views, aug_seed_b, SSL_POLICY)
            loss = nt_xent_loss(head(enc(v1.pixels)), head(enc(v2.pixels)), temperature)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("contrastive loss became non-finite", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    enc.eval()
    return enc


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over the module's parameter and buffer bytes, in state-dict order."""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(module: nn.Module, path: str, manifest: dict | None = None):
    """Write the module weights plus a human-readable key-value manifest."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(module.state_dict(), path)
    lines = dict(manifest or {})
    lines.setdefault("arch", getattr(module, "arch", module.__class__.__name__))
    lines["checksum"] = state_checksum(module)
    with open(path + ".manifest", "w") as fh:
        for key in sorted(lines):
            fh.write(f"{key}: {lines[key]}\n")


def load_checkpoint(module: nn.Module, path: str) -> nn.Module:
    module.load_state_dict(torch.load(path, weights_only=True))
    return module
