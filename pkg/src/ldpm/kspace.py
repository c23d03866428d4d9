"""Core k-space numerics: centered Fourier operators, undersampling,
data consistency and coil combination.

Conventions (fixed across the whole package):
    * 2-D FFTs are orthonormal (``norm="ortho"``) so Parseval holds exactly.
    * k-space is stored centered: the DC component sits at ``(H//2, W//2)``,
      i.e. every transform is wrapped in fftshift/ifftshift pairs.
    * Sampling masks are 1-D column masks broadcast over rows (Cartesian
      phase-encode undersampling along the last axis).

All functions are pure and accept arbitrary leading batch dimensions:
images and k-space grids are ``(..., H, W)`` complex tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x.real).all() or (x.is_complex() and not torch.isfinite(x.imag).all()):
        raise ValueError(f"{name} contains non-finite entries")


def _as_complex(x: torch.Tensor) -> torch.Tensor:
    """View a real tensor as complex with zero imaginary part.

    Magnitude images go through data consistency as zero-phase complex
    images; complex inputs pass through unchanged.
    """
    if x.is_complex():
        return x
    return torch.complex(x, torch.zeros_like(x))


@dataclass(frozen=True)
class SamplingMask:
    """Cartesian column mask with a fully sampled center band.

    Attributes:
        columns: length-W tensor of {0.0, 1.0}, broadcast over image rows.
        af: nominal acceleration factor the mask was generated for.
        center_fraction: fraction of fully sampled central columns.
    """

    columns: torch.Tensor
    af: float
    center_fraction: float

    def __post_init__(self):
        cols = self.columns
        if cols.ndim != 1:
            raise ValueError(f"mask columns must be 1-D, got shape {tuple(cols.shape)}")
        vals = torch.unique(cols)
        if not torch.all((vals == 0) | (vals == 1)):
            raise ValueError("mask columns must be binary")

    @property
    def width(self) -> int:
        return self.columns.shape[0]

    def as_row(self, dtype: torch.dtype) -> torch.Tensor:
        """Mask as a ``(1, W)`` real tensor ready to broadcast over ``(..., H, W)``."""
        real_dtype = dtype
        if dtype.is_complex:
            real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
        return self.columns.to(real_dtype).unsqueeze(0)

    def apply(self, k: torch.Tensor) -> torch.Tensor:
        """Zero out unsampled columns of a ``(..., H, W)`` k-space tensor."""
        if k.shape[-1] != self.width:
            raise ValueError(
                f"mask width {self.width} does not match k-space width {k.shape[-1]}"
            )
        return k * self.as_row(k.dtype)

    def complement(self, k: torch.Tensor) -> torch.Tensor:
        """Keep only the unsampled columns (the ``I - M`` part)."""
        if k.shape[-1] != self.width:
            raise ValueError(
                f"mask width {self.width} does not match k-space width {k.shape[-1]}"
            )
        return k * (1.0 - self.as_row(k.dtype))


def forward_fft(x: torch.Tensor) -> torch.Tensor:
    """Centered orthonormal 2-D FFT over the trailing two axes.

    Args:
        x: ``(..., H, W)`` image, real or complex; real input is promoted.

    Returns:
        ``(..., H, W)`` complex k-space with DC at the grid center.
    """
    x = _as_complex(x)
    _check_finite(x, "image")
    return torch.fft.fftshift(
        torch.fft.fft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"),
        dim=(-2, -1),
    )


def inverse_fft(k: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`forward_fft` (centered, orthonormal)."""
    k = _as_complex(k)
    _check_finite(k, "k-space")
    return torch.fft.fftshift(
        torch.fft.ifft2(torch.fft.ifftshift(k, dim=(-2, -1)), norm="ortho"),
        dim=(-2, -1),
    )


def undersample(k_full: torch.Tensor, mask: SamplingMask) -> torch.Tensor:
    """Elementwise mask application: measured columns kept, the rest zeroed."""
    _check_finite(_as_complex(k_full), "k-space")
    return mask.apply(_as_complex(k_full))


def data_consistency(x: torch.Tensor, k_u: torch.Tensor, mask: SamplingMask) -> torch.Tensor:
    """Replace the measured k-space region of ``x`` with the acquired data.

    Computes ``F^-1{ F(x) * (I - M) + k_u * M }``. Real (magnitude) inputs
    are treated as complex images with zero imaginary part; the result is
    complex and callers decide whether to take the magnitude.

    Args:
        x: ``(..., H, W)`` image, real or complex.
        k_u: ``(..., H, W)`` measured (already masked) k-space.
        mask: sampling mask whose support marks the measured columns.

    Returns:
        ``(..., H, W)`` complex image agreeing with ``k_u`` on the mask
        support and with ``F(x)`` on its complement.
    """
    x = _as_complex(x)
    k_u = _as_complex(k_u)
    if x.shape[-2:] != k_u.shape[-2:]:
        raise ValueError(
            f"image shape {tuple(x.shape[-2:])} does not match k-space shape {tuple(k_u.shape[-2:])}"
        )
    k_x = forward_fft(x)
    merged = mask.complement(k_x) + mask.apply(k_u)
    return inverse_fft(merged)


def rss_combine(coil_images: torch.Tensor) -> torch.Tensor:
    """Root-sum-of-squares coil combination.

    Args:
        coil_images: ``(C, H, W)`` (or batched ``(..., C, H, W)``) complex
            per-coil images, C >= 1.

    Returns:
        Real nonnegative magnitude image, coil axis reduced.
    """
    if coil_images.ndim < 3:
        raise ValueError("expected at least (C, H, W) coil images")
    if coil_images.shape[-3] < 1:
        raise ValueError("coil count must be >= 1")
    coil_images = _as_complex(coil_images)
    _check_finite(coil_images, "coil images")
    return torch.sqrt(torch.sum(torch.abs(coil_images) ** 2, dim=-3))


def zero_filled_recon(k_u: torch.Tensor) -> torch.Tensor:
    """Magnitude of the inverse FFT of (zero-filled) undersampled k-space."""
    return torch.abs(inverse_fft(k_u))
