"""Conditioned latent denoiser: a small frozen U-Net prior plus a
trainable control branch wired in through zero-initialized projections,
with the cumulative noise schedule and the noise-prediction training loss.

The control branch is a copy of the base encoder and middle blocks whose
input is the noisy latent concatenated with the condition latent; the
extra input channels and every connector conv start at exactly zero, so an
untrained model reproduces the frozen base bit for bit and is invariant to
the condition.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .checkpoint import state_dict_hash
from .data import Sample
from .sketcher import RepairModel, make_condition
from .vae import VaeModel, encode

Step = "int | torch.Tensor"


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing cumulative signal levels alpha_1..alpha_T in (0, 1].

    The convention alpha_0 = 1 is built into :meth:`alpha` so samplers can
    treat step 0 as the fully denoised endpoint.
    """

    alphas: torch.Tensor

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or a.shape[0] < 2:
            raise ValueError("schedule needs at least 2 steps")
        if not torch.all((a > 0) & (a <= 1)):
            raise ValueError("alphas must lie in (0, 1]")
        if not torch.all(a[1:] < a[:-1]):
            raise ValueError("alphas must be strictly decreasing")

    @property
    def T(self) -> int:
        return self.alphas.shape[0]

    def alpha(self, t: int) -> float:
        """alpha_t for t in [0, T], with alpha(0) = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return float(self.alphas[t - 1])

    def alpha_batch(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Per-element alpha_t as a broadcastable (B, 1, 1, 1) tensor."""
        if torch.any((t < 0) | (t > self.T)):
            raise ValueError("step indices outside [0, T]")
        table = torch.cat([torch.ones(1, dtype=self.alphas.dtype), self.alphas])
        return table[t].to(like.dtype).view(-1, 1, 1, 1)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """Cumulative alphas from a linear beta ramp (alpha_1 = 1 - beta_start)."""
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        return cls(alphas=torch.cumprod(1.0 - betas, dim=0))


def add_noise(z: torch.Tensor, t: Step, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noising step: ``sqrt(alpha_t) z + sqrt(1 - alpha_t) eps``.

    ``t`` is a single step index applied to everything, or a (B,) tensor of
    per-element steps for batched training.
    """
    if z.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if torch.any((t < 1) | (t > sched.T)):
            raise ValueError("step indices outside [1, T]")
        a = sched.alpha_batch(t, z)
        return a.sqrt() * z + (1.0 - a).sqrt() * eps
    t_int = int(t)
    if not 1 <= t_int <= sched.T:
        raise ValueError(f"step {t_int} outside [1, {sched.T}]")
    a = sched.alpha(t_int)
    return math.sqrt(a) * z + math.sqrt(1.0 - a) * eps


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.dtype)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class _UBlock(nn.Module):
    """Residual block with additive time-embedding injection."""

    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch)
        self.norm2 = _norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class _Encoder(nn.Module):
    """Stem + two resolutions + middle; returns the skip and middle features."""

    def __init__(self, in_ch: int, widths: tuple[int, int], emb_dim: int):
        super().__init__()
        w0, w1 = widths
        self.stem = nn.Conv2d(in_ch, w0, 3, padding=1)
        self.block1 = _UBlock(w0, emb_dim)
        self.down = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.block2 = _UBlock(w1, emb_dim)
        self.middle = _UBlock(w1, emb_dim)

    def forward(self, x, temb):
        h1 = self.block1(self.stem(x), temb)
        h2 = self.block2(self.down(h1), temb)
        hm = self.middle(h2, temb)
        return h1, hm


class SmallUnet(nn.Module):
    """Latent-space noise predictor with two resolutions and one skip."""

    def __init__(self, channels: int = 4, widths: tuple[int, int] = (32, 64), emb_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        self.emb_dim = emb_dim
        w0, w1 = widths
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.encoder = _Encoder(channels, self.widths, emb_dim)
        self.up = nn.Conv2d(w1, w0, 3, padding=1)
        self.fuse = nn.Conv2d(2 * w0, w0, 3, padding=1)
        self.out_block = _UBlock(w0, emb_dim)
        self.head = nn.Sequential(_norm(w0), nn.SiLU(), nn.Conv2d(w0, channels, 3, padding=1))

    def embed(self, t: torch.Tensor, shift: torch.Tensor | None = None) -> torch.Tensor:
        emb = _sinusoidal_embedding(t, self.emb_dim)
        if shift is not None:
            emb = emb + shift
        return self.time_mlp(emb)

    def decode(self, skip, middle, temb):
        u = self.up(torch.nn.functional.interpolate(middle, scale_factor=2, mode="nearest"))
        u = self.fuse(torch.cat([u, skip], dim=1))
        u = self.out_block(u, temb)
        return self.head(u)

    def forward(self, x, t, shift=None):
        temb = self.embed(t, shift)
        skip, middle = self.encoder(x, temb)
        return self.decode(skip, middle, temb)


class ControlDenoiser(nn.Module):
    """Frozen base U-Net plus a trainable condition branch.

    The control encoder is initialized as a copy of the base encoder with
    the condition's extra input channels zeroed; its features enter the
    base decoder through zero 1x1 convs, so training starts exactly at the
    base model's behavior.
    """

    def __init__(
        self,
        base: SmallUnet,
        schedule: NoiseSchedule,
        latent_scale: float = 1.0,
        freeze_base: bool = True,
    ):
        super().__init__()
        self.base = base
        self.schedule = schedule
        w0, w1 = base.widths
        ch = base.channels

        self.control = copy.deepcopy(base.encoder)
        stem = nn.Conv2d(2 * ch, w0, 3, padding=1)
        with torch.no_grad():
            stem.weight.zero_()
            stem.weight[:, :ch] = base.encoder.stem.weight
            stem.bias.copy_(base.encoder.stem.bias)
        self.control.stem = stem

        self.connect_skip = nn.Conv2d(w0, w0, 1)
        self.connect_middle = nn.Conv2d(w1, w1, 1)
        for conv in (self.connect_skip, self.connect_middle):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

        # constant stand-in for an empty prompt, added to the time embedding
        self.register_buffer("null_condition", torch.zeros(base.emb_dim))
        self.register_buffer("latent_scale_buf", torch.tensor(float(latent_scale)))
        self.frozen = freeze_base
        if freeze_base:
            for p in self.base.parameters():
                p.requires_grad_(False)

    @property
    def latent_scale(self) -> float:
        return float(self.latent_scale_buf)

    def trainable_parameters(self):
        yield from self.control.parameters()
        yield from self.connect_skip.parameters()
        yield from self.connect_middle.parameters()

    def forward(self, z_t, t, c_latent):
        temb = self.base.embed(t, self.null_condition)
        skip, middle = self.base.encoder(z_t, temb)
        c_skip, c_middle = self.control(torch.cat([z_t, c_latent], dim=1), temb)
        skip = skip + self.connect_skip(c_skip)
        middle = middle + self.connect_middle(c_middle)
        return self.base.decode(skip, middle, temb)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (ch, h, w) or (B, ch, h, w), got {tuple(x.shape)}")


def predict_noise(model: ControlDenoiser, z_t: torch.Tensor, t: Step, c_latent: torch.Tensor) -> torch.Tensor:
    """Noise estimate for a noisy latent under a condition latent.

    ``t`` may be a python int (shared step) or a (B,) tensor.
    """
    zb, single = _as_batch(z_t)
    cb, _ = _as_batch(c_latent)
    if cb.shape[0] == 1 and zb.shape[0] > 1:
        cb = cb.expand(zb.shape[0], -1, -1, -1)
    if cb.shape != zb.shape:
        raise ValueError(f"condition shape {tuple(cb.shape)} != latent shape {tuple(zb.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        tv = t.to(torch.float32)
    else:
        tv = torch.full((zb.shape[0],), float(int(t)), dtype=torch.float32)
    out = model(zb, tv, cb)
    return out[0] if single else out


def mrcn_loss(
    model: ControlDenoiser,
    z: torch.Tensor,
    t: Step,
    eps: torch.Tensor,
    c_latent: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error between true and predicted noise at step t."""
    z_t = add_noise(z, t, eps, model.schedule)
    eps_hat = predict_noise(model, z_t, t, c_latent)
    return torch.mean((eps - eps_hat) ** 2)


@dataclass
class GeneratorTrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    widths: tuple[int, int] = (32, 64)
    emb_dim: int = 64
    base_epochs: int = 30
    epochs: int = 50
    base_lr: float = 1e-3
    lr: float = 2e-4
    batch_size: int = 16
    seed: int = 0


def _condition_batch(
    samples: list[Sample], repair: RepairModel, vae: VaeModel
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-batch condition latents and clean latents (mean encode)."""
    conditions = torch.stack(
        [make_condition(repair, s.zero_filled, s.k_u, s.mask) for s in samples]
    )
    gts = torch.stack([s.ground_truth for s in samples])
    with torch.no_grad():
        _, c_lat = encode(vae, conditions)
        _, z = encode(vae, gts)
    return c_lat, z


def train_generator(
    dataset: dict[str, list[Sample]],
    config: GeneratorTrainConfig,
    repair: RepairModel,
    vae: VaeModel,
) -> tuple[ControlDenoiser, dict]:
    """Two-phase training of the conditioned denoiser.

    Phase 1 trains the small base U-Net unconditionally on (scaled) clean
    latents; phase 2 freezes it, wraps it in a control branch, and trains
    only the branch and its connectors on sketcher conditions. The repair
    model and the VAE are used frozen throughout; the base parameters are
    verified bit-identical across phase 2.
    """
    if repair is None or vae is None:
        raise ValueError("train_generator needs trained sketcher and VAE models")
    train = dataset.get("train") or []
    if not train:
        raise ValueError("training dataset is empty")
    val = dataset.get("val") or train

    repair.eval()
    vae.eval()
    sched = NoiseSchedule.linear(config.T, config.beta_start, config.beta_end)
    gen = torch.Generator().manual_seed(config.seed)

    with torch.no_grad():
        _, z_train = encode(vae, torch.stack([s.ground_truth for s in train]))
    latent_scale = float(1.0 / z_train.std().clamp_min(1e-6))
    z_train = z_train * latent_scale

    ch = vae.config.latent_channels
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        base = SmallUnet(channels=ch, widths=config.widths, emb_dim=config.emb_dim)

    history: dict = {"base_loss": [], "val_loss": [], "train_loss": [], "latent_scale": latent_scale}

    # phase 1: unconditional prior on clean latents
    opt = torch.optim.Adam(base.parameters(), lr=config.base_lr)
    n = z_train.shape[0]
    for epoch in range(config.base_epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            zb = z_train[order[start : start + config.batch_size]]
            t = torch.randint(1, sched.T + 1, (zb.shape[0],), generator=gen)
            eps = torch.randn(zb.shape, generator=gen)
            z_t = add_noise(zb, t, eps, sched)
            loss = torch.mean((eps - base(z_t, t.to(torch.float32))) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError(f"base denoiser diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * zb.shape[0]
        history["base_loss"].append(epoch_loss / n)

    model = ControlDenoiser(base, sched, latent_scale=latent_scale, freeze_base=True)
    base_hash = state_dict_hash(dict(base.state_dict()))
    history["base_hash_before"] = base_hash

    # fixed validation draws so epochs are comparable
    val_c, val_z = _condition_batch(val, repair, vae)
    val_z = val_z * latent_scale
    val_gen = torch.Generator().manual_seed(config.seed + 1)
    val_t = torch.randint(1, sched.T + 1, (val_z.shape[0],), generator=val_gen)
    val_eps = torch.randn(val_z.shape, generator=val_gen)

    def val_loss() -> float:
        model.eval()
        with torch.no_grad():
            return float(mrcn_loss(model, val_z, val_t, val_eps, val_c))

    history["val_loss"].append(val_loss())

    # phase 2: control branch only
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train[int(i)] for i in order[start : start + config.batch_size]]
            c_lat, z = _condition_batch(batch, repair, vae)
            z = z * latent_scale
            t = torch.randint(1, sched.T + 1, (z.shape[0],), generator=gen)
            eps = torch.randn(z.shape, generator=gen)
            loss = mrcn_loss(model, z, t, eps, c_lat)
            if not torch.isfinite(loss):
                raise RuntimeError(f"control training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * z.shape[0]
        history["train_loss"].append(epoch_loss / n)
        history["val_loss"].append(val_loss())

    history["base_hash_after"] = state_dict_hash(dict(base.state_dict()))
    if history["base_hash_after"] != base_hash:
        raise RuntimeError("frozen base denoiser parameters changed during control training")
    model.eval()
    return model, history
