"""Sketcher: a residual repair CNN that erases aliasing from zero-filled
images, followed by data consistency, producing the condition image that
steers the latent generator.

The repair network is an EDSR-flavored residual stack whose final
projection is zero-initialized, so an untrained model is exactly the
identity and any training step can only move it away from the zero-filled
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import DatasetSpec, Sample, regenerate_mask
from .kspace import SamplingMask, data_consistency, undersample, zero_filled_recon


@dataclass(frozen=True)
class RepairConfig:
    width: int = 32
    n_blocks: int = 4


class _RepairBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        return x + self.conv2(h)


class RepairModel(nn.Module):
    """Image-to-image artifact removal network (1-channel magnitude).

    Fully convolutional with no down/upsampling, so any H x W is
    supported and output shape always equals input shape.
    """

    def __init__(self, config: RepairConfig = RepairConfig(), init_seed: int | None = None):
        super().__init__()
        self.config = config
        w = config.width
        with torch.random.fork_rng():
            if init_seed is not None:
                torch.manual_seed(init_seed)
            self.stem = nn.Conv2d(1, w, 3, padding=1)
            self.blocks = nn.Sequential(*[_RepairBlock(w) for _ in range(config.n_blocks)])
            self.head = nn.Conv2d(w, 1, 3, padding=1)
        # zero head: the untrained model is the identity map
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        h = self.stem(x)
        h = self.blocks(h)
        return x + self.head(h)


def repair(model: RepairModel, x_u: torch.Tensor) -> torch.Tensor:
    """Run the repair network on a magnitude image.

    Args:
        x_u: (H, W) image or (B, H, W) batch.
    """
    single = x_u.ndim == 2
    if single:
        x_u = x_u[None]
    if x_u.ndim != 3:
        raise ValueError(f"expected (H, W) or (B, H, W), got {tuple(x_u.shape)}")
    out = model(x_u[:, None])[:, 0]
    return out[0] if single else out


def make_condition(
    model: RepairModel,
    x_u: torch.Tensor,
    k_u: torch.Tensor,
    mask: SamplingMask,
) -> torch.Tensor:
    """Condition image: repair, then enforce measured k-space.

    ``c = |DC(R(x_u), k_u, M)|`` -- whatever the repair quality, the
    measured columns of F(c)'s parent complex image match ``k_u``.
    """
    repaired = repair(model, x_u)
    return torch.abs(data_consistency(repaired, k_u, mask))


@dataclass
class SketcherTrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    crop: int = 96
    seed: int = 0
    width: int = 32
    n_blocks: int = 4


def _zero_filled_input(sample: Sample, mask: SamplingMask | None = None) -> torch.Tensor:
    if mask is None:
        return sample.zero_filled
    return zero_filled_recon(undersample(sample.k_full, mask)).to(torch.float32)


def _random_crop_pair(
    a: torch.Tensor, b: torch.Tensor, crop: int, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    h, w = a.shape
    ch, cw = min(crop, h), min(crop, w)
    top = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
    return a[top : top + ch, left : left + cw], b[top : top + ch, left : left + cw]


def train_sketcher(
    dataset: dict[str, list[Sample]],
    config: SketcherTrainConfig,
    spec: DatasetSpec | None = None,
) -> tuple[RepairModel, dict]:
    """Train the repair network with pixel L1 against ground truth.

    Augmentation: random crops, random flips, and (when ``spec`` is
    given) per-sample regenerated undersampling masks each epoch.
    Validation uses the fixed dataset masks on full images.
    """
    train = dataset.get("train") or []
    if not train:
        raise ValueError("training dataset is empty")
    val = dataset.get("val") or train

    model = RepairModel(
        RepairConfig(width=config.width, n_blocks=config.n_blocks), init_seed=config.seed
    )
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    val_pairs = [(s.zero_filled, s.ground_truth) for s in val]

    def validation_l1() -> float:
        model.eval()
        with torch.no_grad():
            losses = [float(torch.mean(torch.abs(repair(model, xu) - gt))) for xu, gt in val_pairs]
        return float(sum(losses) / len(losses))

    history: dict = {"val_l1": [validation_l1()], "train_loss": []}
    n = len(train)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            xs, ys = [], []
            for idx in order[start : start + config.batch_size]:
                s = train[int(idx)]
                mask = regenerate_mask(s, spec, epoch) if spec is not None else None
                xu, gt = _zero_filled_input(s, mask), s.ground_truth
                xu, gt = _random_crop_pair(xu, gt, config.crop, gen)
                if int(torch.randint(0, 2, (1,), generator=gen)):
                    xu, gt = torch.flip(xu, [1]), torch.flip(gt, [1])
                if int(torch.randint(0, 2, (1,), generator=gen)):
                    xu, gt = torch.flip(xu, [0]), torch.flip(gt, [0])
                xs.append(xu)
                ys.append(gt)
            xb, yb = torch.stack(xs), torch.stack(ys)
            loss = torch.mean(torch.abs(repair(model, xb) - yb))
            if not torch.isfinite(loss):
                raise RuntimeError(f"sketcher training diverged at epoch {epoch}: loss={float(loss)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * xb.shape[0]
        history["train_loss"].append(epoch_loss / n)
        history["val_l1"].append(validation_l1())
    model.eval()
    return model, history
