"""MR-adapted variational autoencoder: encoder/decoder between magnitude
images and a compact latent grid, trained with pixel + feature-space +
KL losses.

The feature-space ("perceptual") term uses a small fixed convolutional
stack with seed-frozen random weights instead of a large pretrained
network: it still measures multi-scale feature agreement but carries no
external dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .data import Sample

_FEATURE_SEED = 0x0FEA


@dataclass(frozen=True)
class VaeConfig:
    latent_channels: int = 4
    width: int = 16
    # loss weights: pixel, feature, KL
    mu: float = 1.0
    nu: float = 0.01
    omega: float = 1e-8

    @property
    def downsample(self) -> int:
        # two stride-2 stages
        return 4


@dataclass
class GaussianPosterior:
    """Elementwise Gaussian over the latent grid (mean ``u``, std ``sigma``)."""

    u: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.u.shape != self.sigma.shape:
            raise ValueError("posterior mean and std must share a shape")
        if not torch.all(self.sigma > 0):
            raise ValueError("posterior std must be strictly positive")


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            _norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            _norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class VaeModel(nn.Module):
    """Encoder/decoder pair with a 4x spatial downsample.

    The encoder emits (mean, log-variance) maps with ``latent_channels``
    channels each; the decoder maps a latent grid back to a [0, 1]
    magnitude image (sigmoid output).
    """

    def __init__(self, config: VaeConfig = VaeConfig(), init_seed: int | None = None):
        super().__init__()
        self.config = config
        w, ch = config.width, config.latent_channels
        with torch.random.fork_rng():
            if init_seed is not None:
                torch.manual_seed(init_seed)
            self.encoder = nn.Sequential(
                nn.Conv2d(1, w, 3, padding=1),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                ResBlock(2 * w),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
                ResBlock(4 * w),
                _norm(4 * w),
                nn.SiLU(),
                nn.Conv2d(4 * w, 2 * ch, 3, padding=1),
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(ch, 4 * w, 3, padding=1),
                ResBlock(4 * w),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(4 * w, 2 * w, 3, padding=1),
                ResBlock(2 * w),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(2 * w, w, 3, padding=1),
                _norm(w),
                nn.SiLU(),
                nn.Conv2d(w, 1, 3, padding=1),
            )

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = self.config.downsample
        return (self.config.latent_channels, h // f, w // f)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """(H, W) -> (1, 1, H, W); (B, H, W) -> (B, 1, H, W)."""
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 3:
        return x[:, None], False
    raise ValueError(f"expected (H, W) or (B, H, W) image, got shape {tuple(x.shape)}")


def encode(
    model: VaeModel,
    x: torch.Tensor,
    rng: torch.Generator | None = None,
) -> tuple[GaussianPosterior, torch.Tensor]:
    """Map an image to its latent posterior and a latent code.

    With ``rng`` the code is a reparameterized draw ``u + sigma * eps``;
    without it the code is the posterior mean (deterministic mode).

    Args:
        x: (H, W) image or (B, H, W) batch; H and W must be divisible by
            the model's downsample factor.

    Returns:
        (posterior, code); code shape is (ch, H/f, W/f), batched if the
        input was batched.
    """
    xb, single = _batched(x)
    f = model.config.downsample
    if xb.shape[-2] % f or xb.shape[-1] % f:
        raise ValueError(f"image size {tuple(xb.shape[-2:])} not divisible by {f}")
    stats = model.encoder(xb)
    u, logvar = torch.chunk(stats, 2, dim=1)
    logvar = torch.clamp(logvar, -30.0, 20.0)
    sigma = torch.exp(0.5 * logvar)
    if rng is None:
        code = u
    else:
        eps = torch.randn(u.shape, generator=rng, dtype=u.dtype, device=u.device)
        code = u + sigma * eps
    if single:
        u, sigma, code = u[0], sigma[0], code[0]
    return GaussianPosterior(u=u, sigma=sigma), code


def decode(model: VaeModel, z: torch.Tensor) -> torch.Tensor:
    """Map a latent code back to a [0, 1] magnitude image.

    Args:
        z: (ch, h, w) latent or (B, ch, h, w) batch.
    """
    single = z.ndim == 3
    if single:
        z = z[None]
    if z.ndim != 4 or z.shape[1] != model.config.latent_channels:
        raise ValueError(
            f"latent shape {tuple(z.shape)} does not match "
            f"{model.config.latent_channels} latent channels"
        )
    out = torch.sigmoid(model.decoder(z))[:, 0]
    return out[0] if single else out


def kl_divergence(posterior: GaussianPosterior) -> torch.Tensor:
    """Mean over elements of KL(N(u, sigma^2) || N(0, 1)).

    Per element: ``0.5 * (u^2 + sigma^2 - 1 - ln sigma^2)``; always >= 0,
    zero exactly at (u=0, sigma=1).
    """
    u, sigma = posterior.u, posterior.sigma
    if not torch.all(sigma > 0):
        raise ValueError("posterior std must be strictly positive")
    return torch.mean(0.5 * (u**2 + sigma**2 - 1.0 - torch.log(sigma**2)))


class FeatureExtractor(nn.Module):
    """Fixed random-weight conv stack; three feature scales."""

    def __init__(self, seed: int = _FEATURE_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [(1, 8, 1), (8, 16, 2), (16, 32, 2)]
        self.convs = nn.ModuleList()
        for cin, cout, stride in chans:
            conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
                conv.bias.zero_()
            self.convs.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.silu(conv(h))
            feats.append(h)
        return feats


_extractors: dict[torch.dtype, FeatureExtractor] = {}


def _get_extractor(dtype: torch.dtype) -> FeatureExtractor:
    if dtype not in _extractors:
        _extractors[dtype] = FeatureExtractor().to(dtype)
    return _extractors[dtype]


def perceptual_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """L1 distance between fixed-extractor feature maps, summed over scales."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    a, _ = _batched(x_hat)
    b, _ = _batched(x)
    extractor = _get_extractor(a.dtype)
    loss = a.new_zeros(())
    for fa, fb in zip(extractor(a), extractor(b)):
        loss = loss + torch.mean(torch.abs(fa - fb))
    return loss


def vae_loss(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    posterior: GaussianPosterior,
    weights: tuple[float, float, float] = (1.0, 0.01, 1e-8),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Three-term reconstruction loss: pixel L1 + feature L1 + KL.

    Returns the weighted total plus the raw per-term values for logging.
    """
    mu, nu, omega = weights
    pixel = torch.mean(torch.abs(x_hat - x))
    feats = perceptual_loss(x_hat, x)
    kl = kl_divergence(posterior)
    total = mu * pixel + nu * feats + omega * kl
    parts = {"pixel": float(pixel), "perceptual": float(feats), "kl": float(kl)}
    return total, parts


@dataclass
class VaeTrainConfig:
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    width: int = 16
    latent_channels: int = 4
    log_every: int = 50


def train_vae(
    dataset: dict[str, list[Sample]],
    config: VaeTrainConfig,
) -> tuple[VaeModel, dict]:
    """Train the VAE on ground-truth magnitude images.

    Returns the model plus a history dict with per-epoch train and
    validation losses (validation is reconstruction L1 with mean-encode).
    """
    if not dataset.get("train"):
        raise ValueError("training dataset is empty")
    vae_cfg = VaeConfig(latent_channels=config.latent_channels, width=config.width)
    model = VaeModel(vae_cfg, init_seed=config.seed)
    weights = (vae_cfg.mu, vae_cfg.nu, vae_cfg.omega)

    train_x = torch.stack([s.ground_truth for s in dataset["train"]])
    val_x = torch.stack([s.ground_truth for s in dataset.get("val", dataset["train"])])

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    def validation_l1() -> float:
        model.eval()
        with torch.no_grad():
            _, code = encode(model, val_x)
            recon = decode(model, code)
            return float(torch.mean(torch.abs(recon - val_x)))

    history: dict = {"val_l1": [validation_l1()], "train_loss": [], "terms": []}
    n = train_x.shape[0]
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = train_x[order[start : start + config.batch_size]]
            posterior, code = encode(model, batch, rng=gen)
            recon = decode(model, code)
            loss, parts = vae_loss(recon, batch, posterior, weights)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"VAE training diverged at epoch {epoch}: loss={float(loss)} terms={parts}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * batch.shape[0]
            history["terms"].append(parts)
        history["train_loss"].append(epoch_loss / n)
        history["val_l1"].append(validation_l1())
    model.eval()
    return model, history
