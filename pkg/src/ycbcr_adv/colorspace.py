"""JFIF RGB <-> YCbCr conversion and per-channel distance accounting.

Two flavours live here. The numpy API works on tagged :class:`ImageBatch`
objects in NHWC layout and is what analysis code uses. The ``*_t`` torch
helpers work on raw NCHW tensors in UNIT scale and are used inside attack
loops and the defense network, where autograd and speed matter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

# rows: Y, Cb, Cr; columns: R, G, B
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])

# rows: R, G, B; columns: Y, Cb - 128, Cr - 128
YCBCR_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


class ColorSpace(enum.Enum):
    RGB = "rgb"
    YCBCR = "ycbcr"


class Scale(enum.Enum):
    UNIT = "unit"  # nominally [0, 1]
    BYTE = "byte"  # nominally [0, 255]


class ColorSpaceError(ValueError):
    """Raised when a batch carries the wrong space/scale tag or shape."""


@dataclass(frozen=True)
class ImageBatch:
    """N x H x W x 3 float array tagged with its color space and value scale."""

    data: np.ndarray
    space: ColorSpace = ColorSpace.RGB
    scale: Scale = Scale.UNIT

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ColorSpaceError(f"expected N x H x W x 3 data, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)

    def __len__(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def to_byte(self) -> "ImageBatch":
        if self.scale is Scale.BYTE:
            return self
        return ImageBatch(self.data * 255.0, self.space, Scale.BYTE)

    def to_unit(self) -> "ImageBatch":
        if self.scale is Scale.UNIT:
            return self
        return ImageBatch(self.data / 255.0, self.space, Scale.UNIT)

    def channel(self, i: int) -> np.ndarray:
        return self.data[..., i]


@dataclass(frozen=True)
class ChannelDelta:
    per_channel_l2: np.ndarray  # shape (3,) or (N, 3) when computed per image
    space: ColorSpace
    n_pixels: int


def _require(batch: ImageBatch, space: ColorSpace, what: str):
    if batch.space is not space:
        raise ColorSpaceError(f"{what} expects a {space.name} batch, got {batch.space.name}")


def rgb_to_ycbcr(batch: ImageBatch) -> ImageBatch:
    """Apply the JFIF forward transform. Output is BYTE scale, unclamped."""
    _require(batch, ColorSpace.RGB, "rgb_to_ycbcr")
    rgb = batch.to_byte().data.astype(np.float64, copy=False)
    ycc = rgb @ RGB_TO_YCBCR.T + YCBCR_OFFSET
    return ImageBatch(ycc, ColorSpace.YCBCR, Scale.BYTE)


def ycbcr_to_rgb(batch: ImageBatch, clamp: bool = False, to_unit: bool = False) -> ImageBatch:
    """Apply the JFIF inverse transform.

    The result is BYTE scale unless ``to_unit`` is set. Clamping to the valid
    range is opt-in so intermediates keep round-trip fidelity.
    """
    _require(batch, ColorSpace.YCBCR, "ycbcr_to_rgb")
    if batch.scale is not Scale.BYTE:
        raise ColorSpaceError("ycbcr_to_rgb expects BYTE scale input")
    ycc = batch.data.astype(np.float64, copy=False) - YCBCR_OFFSET
    rgb = ycc @ YCBCR_TO_RGB.T
    if clamp:
        rgb = np.clip(rgb, 0.0, 255.0)
    out = ImageBatch(rgb, ColorSpace.RGB, Scale.BYTE)
    return out.to_unit() if to_unit else out


def per_channel_l2(a: ImageBatch, b: ImageBatch, per_image: bool = False) -> ChannelDelta:
    """Per-channel L2 distance between two batches, always measured on BYTE scale.

    With ``per_image`` the result has one row per image, otherwise the sums
    run over the whole batch.
    """
    if a.shape != b.shape:
        raise ColorSpaceError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.space is not b.space or a.scale is not b.scale:
        raise ColorSpaceError("per_channel_l2 needs batches with matching space and scale tags")
    diff = a.to_byte().data.astype(np.float64) - b.to_byte().data.astype(np.float64)
    sq = diff**2
    if per_image:
        l2 = np.sqrt(sq.sum(axis=(1, 2)))
        n_pixels = a.shape[1] * a.shape[2]
    else:
        l2 = np.sqrt(sq.sum(axis=(0, 1, 2)))
        n_pixels = a.shape[0] * a.shape[1] * a.shape[2]
    return ChannelDelta(l2, a.space, n_pixels)


def replace_y(carrier: ImageBatch, y_source: ImageBatch) -> ImageBatch:
    """Give ``carrier`` the Y channel of ``y_source`` while keeping its Cb/Cr.

    A unit change of Y maps to the RGB direction (1, 1, 1) because the chroma
    rows of the forward transform sum to zero, so the swap is done additively
    and the chroma of the carrier is preserved exactly. Y is clamped into the
    range that keeps RGB valid, which again leaves Cb/Cr untouched.
    """
    _require(carrier, ColorSpace.RGB, "replace_y")
    _require(y_source, ColorSpace.RGB, "replace_y")
    if carrier.shape != y_source.shape:
        raise ColorSpaceError(f"shape mismatch: {carrier.shape} vs {y_source.shape}")
    base = carrier.to_byte().data
    dy = rgb_to_ycbcr(y_source).data[..., 0] - rgb_to_ycbcr(carrier).data[..., 0]
    dy = np.clip(dy, -base.min(axis=-1), 255.0 - base.max(axis=-1))
    rgb = base + dy[..., None]
    out = ImageBatch(rgb, ColorSpace.RGB, Scale.BYTE)
    return out.to_unit() if carrier.scale is Scale.UNIT else out


# --- torch helpers (NCHW, UNIT scale in, BYTE scale YCbCr) ---------------------------


def _mat(m: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(m, dtype=like.dtype, device=like.device)


def rgb_to_ycbcr_t(x: torch.Tensor) -> torch.Tensor:
    """NCHW RGB in [0, 1] -> NCHW YCbCr on BYTE scale."""
    ycc = torch.einsum("ij,njhw->nihw", _mat(RGB_TO_YCBCR, x), x * 255.0)
    return ycc + _mat(YCBCR_OFFSET, x).view(1, 3, 1, 1)


def ycbcr_to_rgb_t(ycc: torch.Tensor) -> torch.Tensor:
    """NCHW YCbCr on BYTE scale -> NCHW RGB on UNIT scale, unclamped."""
    shifted = ycc - _mat(YCBCR_OFFSET, ycc).view(1, 3, 1, 1)
    return torch.einsum("ij,njhw->nihw", _mat(YCBCR_TO_RGB, ycc), shifted) / 255.0


def luma_t(x: torch.Tensor) -> torch.Tensor:
    """Y channel (BYTE scale) of an NCHW RGB UNIT tensor, shape N x 1 x H x W."""
    w = _mat(RGB_TO_YCBCR[0], x).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True) * 255.0


def luma_bounds_t(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Interval of Y offsets (UNIT) that keep ``x + offset * (1, 1, 1)`` inside [0, 1]."""
    return -x.min(dim=1, keepdim=True).values, 1.0 - x.max(dim=1, keepdim=True).values


def replace_y_t(carrier: torch.Tensor, y_source: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`replace_y` on NCHW UNIT tensors."""
    dy = (luma_t(y_source) - luma_t(carrier)) / 255.0
    lo, hi = luma_bounds_t(carrier)
    dy = torch.maximum(torch.minimum(dy, hi), lo)
    return carrier + dy
