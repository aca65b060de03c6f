"""Stochastic view generation for contrastive pretraining.

The transformation family covers global brightness and contrast, rotation,
aspect ratio, horizontal symmetry and a randomly sized and located crop.
Composition order is fixed: crop+aspect -> rotate -> flip -> contrast ->
brightness -> clip. Changing the order changes the learned invariances, so
tests pin it.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class AugmentConfig:
    brightness_range: tuple[float, float] = (-25.5, 25.5)  # additive, 10% of dynamic range
    contrast_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-10.0, 10.0)  # degrees, counterclockwise
    aspect_ratio_range: tuple[float, float] = (0.9, 1.1)
    hflip_prob: float = 0.5
    crop_scale_range: tuple[float, float] = (0.4, 1.0)  # fraction of image area
    output_size: tuple[int, int] = (208, 256)  # (height, width)

    def validate(self) -> None:
        for name in ("brightness_range", "contrast_range", "rotation_range",
                     "aspect_ratio_range", "crop_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty interval ({lo}, {hi})")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.crop_scale_range
        if lo <= 0.0 or hi > 1.0:
            raise ValueError("crop_scale_range must lie within (0, 1]")
        lo, hi = self.aspect_ratio_range
        if lo <= 0.0:
            raise ValueError("aspect_ratio_range must be positive")
        h, w = self.output_size
        if h < 1 or w < 1:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: tuple[int, int] = (208, 256)) -> "AugmentConfig":
        """Degenerate config whose every draw is the identity transform."""
        return cls(
            brightness_range=(0.0, 0.0),
            contrast_range=(1.0, 1.0),
            rotation_range=(0.0, 0.0),
            aspect_ratio_range=(1.0, 1.0),
            hflip_prob=0.0,
            crop_scale_range=(1.0, 1.0),
            output_size=output_size,
        )


@dataclass(frozen=True)
class AugmentParams:
    crop_scale: float
    aspect_ratio: float
    crop_box: tuple[float, float, float, float]  # (left, top, right, bottom), px
    rotation_deg: float
    hflip: bool
    contrast_scale: float
    brightness_offset: float


def _crop_extent(scale: float, aspect: float, height: int, width: int) -> tuple[float, float]:
    """Crop width/height with exact area scale*width*height, clamped to bounds
    by trading aspect rather than area."""
    w = width * math.sqrt(scale * aspect)
    h = scale * width * height / w
    if w > width:
        w = float(width)
        h = scale * width * height / w
    if h > height:
        h = float(height)
        w = scale * width * height / h
    return w, h


def sample_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw one parameter set. The draw order below is fixed; reordering
    would silently change every seeded result."""
    config.validate()
    height, width = config.output_size
    scale = float(rng.uniform(*config.crop_scale_range))
    aspect = float(rng.uniform(*config.aspect_ratio_range))
    crop_w, crop_h = _crop_extent(scale, aspect, height, width)
    left = float(rng.uniform(0.0, width - crop_w))
    top = float(rng.uniform(0.0, height - crop_h))
    rotation = float(rng.uniform(*config.rotation_range))
    hflip = bool(rng.random() < config.hflip_prob)
    contrast = float(rng.uniform(*config.contrast_range))
    brightness = float(rng.uniform(*config.brightness_range))
    return AugmentParams(
        crop_scale=scale,
        aspect_ratio=aspect,
        crop_box=(left, top, left + crop_w, top + crop_h),
        rotation_deg=rotation,
        hflip=hflip,
        contrast_scale=contrast,
        brightness_offset=brightness,
    )


def apply(image: np.ndarray, params: AugmentParams,
          output_size: tuple[int, int] | None = None) -> np.ndarray:
    """Apply one sampled transform to a grayscale uint8 image.

    Identity params return the input bit-exact. output_size defaults to the
    input shape; pass it when the views must differ from the source geometry.
    """
    if image.ndim != 2:
        raise ValueError("expected a single-channel HxW image")
    in_h, in_w = image.shape
    out_h, out_w = output_size if output_size is not None else (in_h, in_w)
    left, top, right, bottom = params.crop_box
    if left < 0 or top < 0 or right > in_w or bottom > in_h or right <= left or bottom <= top:
        raise ValueError(f"crop box {params.crop_box} outside image bounds {(in_h, in_w)}")

    arr = image.astype(np.float32)
    identity_crop = (
        (left, top, right, bottom) == (0.0, 0.0, float(in_w), float(in_h))
        and (out_h, out_w) == (in_h, in_w)
    )
    if not identity_crop:
        im = Image.fromarray(arr, mode="F")
        im = im.resize((out_w, out_h), resample=Image.BILINEAR,
                       box=(left, top, right, bottom))
        arr = np.asarray(im, dtype=np.float32)
    if params.rotation_deg != 0.0:
        im = Image.fromarray(arr, mode="F")
        im = im.rotate(params.rotation_deg, resample=Image.BILINEAR,
                       expand=False, fillcolor=0.0)
        arr = np.asarray(im, dtype=np.float32)
    if params.hflip:
        arr = arr[:, ::-1]
    if params.contrast_scale != 1.0:
        arr = arr * params.contrast_scale
    if params.brightness_offset != 0.0:
        arr = arr + params.brightness_offset
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def make_pair(image: np.ndarray, config: AugmentConfig,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views of one image from a single rng stream."""
    p1 = sample_params(config, rng)
    p2 = sample_params(config, rng)
    out = config.output_size
    return apply(image, p1, out), apply(image, p2, out)
