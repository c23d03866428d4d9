"""Dataset production: synthetic phantoms, Cartesian undersampling masks,
fastMRI-compatible volume loading, and a raw-array dataset cache.

Phantoms and masks are generated from explicit ``numpy.random.Generator``
streams so that a dataset is a pure function of its spec: per-sample
streams are spawned from ``(seed, sample_index, purpose)`` seed sequences,
which keeps splits disjoint and makes regeneration bit-exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import h5py
import numpy as np
import torch

from .kspace import SamplingMask, forward_fft, inverse_fft, rss_combine, undersample, zero_filled_recon

_MASK_RESAMPLE_LIMIT = 1000


def generate_mask(
    width: int,
    af: float,
    center_fraction: float,
    rng: np.random.Generator,
) -> SamplingMask:
    """Draw a random Cartesian column mask.

    The central ``int(center_fraction * width)`` columns are always
    sampled; the remaining columns are kept i.i.d. with probability chosen
    so the expected sampled fraction is ``1 / af``. Draws violating the
    mask's mean-fraction invariant (sampled fraction outside
    ``[0.8/af, 1.5/af]``) are rejected and redrawn, so the result is still
    a deterministic function of the generator state.

    Args:
        width: number of k-space columns, >= 8.
        af: nominal acceleration factor, >= 1.
        center_fraction: fraction of fully sampled central columns.
        rng: seeded generator; consumed.

    Returns:
        A :class:`SamplingMask` with float {0, 1} columns.
    """
    if width < 8:
        raise ValueError(f"mask width must be >= 8, got {width}")
    if af < 1:
        raise ValueError(f"acceleration factor must be >= 1, got {af}")
    if not 0 < center_fraction < 1:
        raise ValueError(f"center_fraction must be in (0, 1), got {center_fraction}")
    if center_fraction > 1.0 / af:
        raise ValueError(
            f"infeasible mask: center_fraction {center_fraction} exceeds 1/af = {1.0 / af:.4f}"
        )

    n_center = int(width * center_fraction)
    n_target = width / af
    # probability for the non-center columns so E[total] = width / af
    prob = (n_target - n_center) / (width - n_center)

    pad = (width - n_center + 1) // 2
    lo, hi = 0.8 * n_target, 1.5 * n_target
    for _ in range(_MASK_RESAMPLE_LIMIT):
        cols = np.zeros(width, dtype=np.float32)
        cols[pad : pad + n_center] = 1.0
        edge = rng.uniform(size=width) < prob
        edge[pad : pad + n_center] = False
        cols[edge] = 1.0
        if lo <= cols.sum() <= hi:
            return SamplingMask(
                columns=torch.from_numpy(cols), af=float(af), center_fraction=float(center_fraction)
            )
    raise RuntimeError(
        f"could not draw a mask within the sampled-fraction bounds after {_MASK_RESAMPLE_LIMIT} tries"
    )


def make_phantom(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random Shepp-Logan-style phantom: a skull ellipse plus randomized
    interior ellipses, clipped to [0, 1].

    Args:
        rng: seeded generator; consumed.
        size: output side length, >= 32.

    Returns:
        ``(size, size)`` float64 array with values in [0, 1].
    """
    if size < 32:
        raise ValueError(f"phantom size must be >= 32, got {size}")

    ys, xs = np.mgrid[0:size, 0:size]
    # normalized coordinates in [-1, 1]
    y = (ys - (size - 1) / 2.0) / (size / 2.0)
    x = (xs - (size - 1) / 2.0) / (size / 2.0)

    img = np.zeros((size, size), dtype=np.float64)

    def add_ellipse(cx, cy, a, b, theta, value):
        ct, st = np.cos(theta), np.sin(theta)
        xr = (x - cx) * ct + (y - cy) * st
        yr = -(x - cx) * st + (y - cy) * ct
        inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        img[inside] += value

    # outer skull and slightly dimmer brain interior
    skull_a = rng.uniform(0.78, 0.88)
    skull_b = rng.uniform(0.68, 0.82)
    add_ellipse(0.0, 0.0, skull_a, skull_b, rng.uniform(-0.15, 0.15), rng.uniform(0.75, 0.95))
    add_ellipse(0.0, rng.uniform(-0.04, 0.04), skull_a * 0.92, skull_b * 0.9, 0.0, rng.uniform(-0.35, -0.2))

    for _ in range(rng.integers(5, 10)):
        cx = rng.uniform(-0.45, 0.45)
        cy = rng.uniform(-0.45, 0.45)
        a = rng.uniform(0.06, 0.35)
        b = rng.uniform(0.06, 0.35)
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(0.1, 0.45) * rng.choice([-1.0, 1.0])
        add_ellipse(cx, cy, a, b, theta, value)

    return np.clip(img, 0.0, 1.0)


def normalize(img: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale an image to [0, 1] by its max.

    Returns the scaled image and the scale factor (the original max), so
    metrics can be mapped back to the native intensity range.
    """
    img = np.asarray(img, dtype=np.float64)
    peak = float(img.max())
    if peak <= 0.0:
        raise ValueError("cannot normalize an all-zero image")
    return img / peak, peak


def load_volume(path: str | Path) -> list[np.ndarray]:
    """Load per-slice multi-coil k-space from an HDF5 volume.

    The file must hold a complex dataset named ``kspace`` with shape
    ``[slices, coils, H, W]``. The last 3 slices of every volume are
    discarded (they are routinely degraded); volumes with <= 3 slices
    yield an empty list and a warning.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    with h5py.File(path, "r") as f:
        if "kspace" not in f:
            raise KeyError(f"volume file {path} has no 'kspace' dataset")
        ds = f["kspace"]
        if ds.ndim != 4:
            raise ValueError(
                f"'kspace' must have rank 4 [slices, coils, H, W], got rank {ds.ndim}"
            )
        data = np.asarray(ds, dtype=np.complex64)
    if data.shape[0] <= 3:
        warnings.warn(
            f"volume {path.name} has only {data.shape[0]} slices; all are discarded",
            stacklevel=2,
        )
        return []
    return [data[i] for i in range(data.shape[0] - 3)]


def save_volume(path: str | Path, kspace: np.ndarray) -> None:
    """Write a ``[slices, coils, H, W]`` complex k-space volume (HDF5)."""
    kspace = np.asarray(kspace, dtype=np.complex64)
    if kspace.ndim != 4:
        raise ValueError(f"expected rank-4 k-space, got rank {kspace.ndim}")
    with h5py.File(path, "w") as f:
        f.create_dataset("kspace", data=kspace)


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-exactly."""

    source: str = "phantom"  # "phantom" | "volume-file"
    image_size: tuple[int, int] = (64, 64)
    n_train: int = 200
    n_val: int = 25
    n_test: int = 50
    seed: int = 0
    accelerations: tuple[float, ...] = (4.0, 8.0)
    center_fractions: tuple[float, ...] = (0.08, 0.04)
    volume_paths: tuple[str, ...] = ()
    normalization: str = "unit-range"

    def __post_init__(self):
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError("image_size entries must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")
        if len(self.accelerations) != len(self.center_fractions):
            raise ValueError("accelerations and center_fractions must pair up")
        if self.source not in ("phantom", "volume-file"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.normalization != "unit-range":
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class Sample:
    """One training/evaluation sample.

    Invariants: ``k_u == undersample(k_full, mask)`` exactly, and
    ``ground_truth`` is the [0, 1]-normalized magnitude of
    ``inverse_fft(k_full)``.
    """

    ground_truth: torch.Tensor  # (H, W) float32 in [0, 1]
    k_full: torch.Tensor  # (H, W) complex64
    k_u: torch.Tensor  # (H, W) complex64
    mask: SamplingMask
    scale: float
    index: int

    @property
    def zero_filled(self) -> torch.Tensor:
        """Magnitude of the naive zero-filled reconstruction."""
        return zero_filled_recon(self.k_u).to(torch.float32)


def _sample_rng(seed: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, purpose])))


def _build_sample(gt: np.ndarray, scale: float, spec: DatasetSpec, index: int) -> Sample:
    mask_rng = _sample_rng(spec.seed, index, 1)
    which = index % len(spec.accelerations)
    mask = generate_mask(
        width=gt.shape[1],
        af=spec.accelerations[which],
        center_fraction=spec.center_fractions[which],
        rng=mask_rng,
    )
    gt_t = torch.from_numpy(gt.astype(np.float32))
    k_full = forward_fft(gt_t.to(torch.float64)).to(torch.complex64)
    k_u = undersample(k_full, mask)
    return Sample(ground_truth=gt_t, k_full=k_full, k_u=k_u, mask=mask, scale=scale, index=index)


def _center_crop(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    if img.shape[0] < h or img.shape[1] < w:
        raise ValueError(f"image {img.shape} smaller than crop {shape}")
    top = (img.shape[0] - h) // 2
    left = (img.shape[1] - w) // 2
    return img[top : top + h, left : left + w]


def _phantom_images(spec: DatasetSpec, indices: range) -> list[tuple[np.ndarray, float]]:
    out = []
    for i in indices:
        rng = _sample_rng(spec.seed, i, 0)
        phantom = make_phantom(rng, max(spec.image_size))
        if spec.image_size[0] != spec.image_size[1]:
            phantom = _center_crop(phantom, spec.image_size)
        out.append(normalize(phantom))
    return out


def _volume_images(spec: DatasetSpec, indices: range) -> list[tuple[np.ndarray, float]]:
    mags: list[np.ndarray] = []
    for p in spec.volume_paths:
        for coil_k in load_volume(p):
            coil_imgs = inverse_fft(torch.from_numpy(coil_k).to(torch.complex128))
            mags.append(rss_combine(coil_imgs).numpy())
    if len(mags) < indices.stop:
        raise ValueError(
            f"volumes provide {len(mags)} usable slices but the spec needs {indices.stop}"
        )
    return [normalize(_center_crop(mags[i], spec.image_size)) for i in indices]


def build_dataset(spec: DatasetSpec) -> dict[str, list[Sample]]:
    """Materialize train/val/test splits from a spec.

    Split index ranges are disjoint by construction; the whole dataset is
    a pure function of the spec.
    """
    bounds = {
        "train": range(0, spec.n_train),
        "val": range(spec.n_train, spec.n_train + spec.n_val),
        "test": range(spec.n_train + spec.n_val, spec.n_train + spec.n_val + spec.n_test),
    }
    images = _phantom_images if spec.source == "phantom" else _volume_images
    splits: dict[str, list[Sample]] = {}
    for name, indices in bounds.items():
        pairs = images(spec, indices)
        splits[name] = [
            _build_sample(gt, scale, spec, i) for (gt, scale), i in zip(pairs, indices)
        ]
    return splits


def regenerate_mask(sample: Sample, spec: DatasetSpec, epoch: int) -> SamplingMask:
    """Fresh mask for augmentation, deterministic in (spec, sample, epoch)."""
    rng = _sample_rng(spec.seed, sample.index, 2 + epoch)
    which = int(rng.integers(0, len(spec.accelerations)))
    return generate_mask(
        width=sample.ground_truth.shape[1],
        af=spec.accelerations[which],
        center_fraction=spec.center_fractions[which],
        rng=rng,
    )


# --- dataset cache -------------------------------------------------------
#
# Layout: one directory with manifest.json plus raw little-endian arrays,
# float32 ('<f4') for real data and complex64 ('<c8') for k-space.


def _write_raw(path: Path, arr: np.ndarray, dtype: str) -> None:
    arr.astype(dtype).tofile(path)


def _read_raw(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.fromfile(path, dtype=dtype).reshape(shape)


def save_dataset(root: str | Path, spec: DatasetSpec, splits: dict[str, list[Sample]]) -> None:
    """Cache a dataset as raw arrays plus a JSON manifest (byte-stable)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": 1, "spec": asdict(spec), "splits": {}}
    for split, samples in splits.items():
        entries = []
        for s in samples:
            stem = f"{split}_{s.index:05d}"
            h, w = s.ground_truth.shape
            _write_raw(root / f"{stem}_gt.f32", s.ground_truth.numpy(), "<f4")
            _write_raw(root / f"{stem}_kfull.c8", s.k_full.numpy(), "<c8")
            _write_raw(root / f"{stem}_ku.c8", s.k_u.numpy(), "<c8")
            _write_raw(root / f"{stem}_mask.f32", s.mask.columns.numpy(), "<f4")
            entries.append(
                {
                    "index": s.index,
                    "shape": [int(h), int(w)],
                    "scale": s.scale,
                    "af": s.mask.af,
                    "center_fraction": s.mask.center_fraction,
                    "stem": stem,
                }
            )
        manifest["splits"][split] = entries
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(root: str | Path) -> tuple[DatasetSpec, dict[str, list[Sample]]]:
    """Load a dataset cached by :func:`save_dataset`."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    spec_d = dict(manifest["spec"])
    for key in ("image_size", "accelerations", "center_fractions", "volume_paths"):
        spec_d[key] = tuple(spec_d[key])
    spec = DatasetSpec(**spec_d)
    splits: dict[str, list[Sample]] = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for e in entries:
            h, w = e["shape"]
            stem = e["stem"]
            gt = torch.from_numpy(_read_raw(root / f"{stem}_gt.f32", "<f4", (h, w)))
            k_full = torch.from_numpy(_read_raw(root / f"{stem}_kfull.c8", "<c8", (h, w)))
            k_u = torch.from_numpy(_read_raw(root / f"{stem}_ku.c8", "<c8", (h, w)))
            cols = torch.from_numpy(_read_raw(root / f"{stem}_mask.f32", "<f4", (w,)))
            mask = SamplingMask(columns=cols, af=e["af"], center_fraction=e["center_fraction"])
            samples.append(
                Sample(
                    ground_truth=gt,
                    k_full=k_full,
                    k_u=k_u,
                    mask=mask,
                    scale=e["scale"],
                    index=e["index"],
                )
            )
        splits[split] = samples
    return spec, splits
