"""Procedural B-scan renderer with per-structure ground-truth masks.

Images are piecewise-constant horizontal layer bands with pathology drawn in,
followed by nuisance transforms (rotation, contrast, brightness) and Gaussian
speckle. The emitted structure mask tags every pathological pixel, giving an
exact localization oracle for attribution tests.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .latents import FluidType, ImageGeometry, LatentFactors

# Structure mask codes.
MASK_NONE = 0
MASK_DRUSEN = 1
MASK_FLUID = 2
MASK_ATROPHY = 3
MASK_SCAR = 4

# Base band intensities (8-bit grayscale).
_VITREOUS = 18.0
_INNER_RETINA = 115.0
_OUTER_NUCLEAR = 55.0
_ELLIPSOID = 165.0
_RPE = 205.0
_CHOROID = 95.0
_SCLERA = 38.0
_DRUSE = 145.0
_FLUID = 12.0
_SCAR = 225.0
_ATROPHY_GAP = 45.0
_HYPERTRANSMISSION = 175.0

# Vertical band anchors as fractions of image height.
_ILM_FRAC = 0.30
_OPL_FRAC = 0.42
_ELLIPSOID_FRAC = 0.50
_RPE_FRAC = 0.54
_RPE_THICKNESS_UM = 21.0


class RenderBoundsError(ValueError):
    """A requested structure does not fit inside the image raster."""


@dataclass
class RenderedBScan:
    image: np.ndarray  # uint8, (H, W)
    structure_mask: np.ndarray  # uint8, (H, W), MASK_* codes


def _band_rows(geometry: ImageGeometry) -> dict:
    h = geometry.height
    rpe_px = max(1, round(_RPE_THICKNESS_UM / geometry.pixel_height_um))
    rows = {
        "ilm": round(_ILM_FRAC * h),
        "opl": round(_OPL_FRAC * h),
        "ellipsoid": round(_ELLIPSOID_FRAC * h),
        "rpe_top": round(_RPE_FRAC * h),
    }
    rows["rpe_bottom"] = rows["rpe_top"] + rpe_px
    return rows


def _draw_bands(canvas: np.ndarray, rows: dict, choroid_px: int) -> None:
    canvas[: rows["ilm"]] = _VITREOUS
    canvas[rows["ilm"] : rows["opl"]] = _INNER_RETINA
    canvas[rows["opl"] : rows["ellipsoid"]] = _OUTER_NUCLEAR
    canvas[rows["ellipsoid"] : rows["rpe_top"]] = _ELLIPSOID
    canvas[rows["rpe_top"] : rows["rpe_bottom"]] = _RPE
    choroid_bottom = rows["rpe_bottom"] + choroid_px
    canvas[rows["rpe_bottom"] : choroid_bottom] = _CHOROID
    canvas[choroid_bottom:] = _SCLERA


def _drusen_positions(latents: LatentFactors, geometry: ImageGeometry, center_col: float) -> list:
    """Deterministic bump centers: evenly spaced around the fovea column."""
    width_px = latents.drusen_diameter_um / geometry.pixel_width_um
    spacing = max(1.5 * width_px, 150.0 / geometry.pixel_width_um)
    n = latents.drusen_count
    return [center_col + (i - (n - 1) / 2.0) * spacing for i in range(n)]


def _draw_drusen(canvas, mask, latents, geometry, rows, center_col) -> None:
    width_px = latents.drusen_diameter_um / geometry.pixel_width_um
    cols = max(1, round(width_px))
    height_um = 0.35 * latents.drusen_diameter_um
    bump_h = int(np.clip(round(height_um / geometry.pixel_height_um), 2, 0.12 * geometry.height))
    rpe_top = rows["rpe_top"]
    rpe_px = rows["rpe_bottom"] - rpe_top

    for cx in _drusen_positions(latents, geometry, center_col):
        start = round(cx - cols / 2.0)
        if start < 0 or start + cols > geometry.width:
            raise RenderBoundsError(
                f"drusen bump at column {cx:.1f} exceeds image width {geometry.width}"
            )
        if rpe_top - bump_h < rows["ilm"]:
            raise RenderBoundsError("drusen elevation reaches above the inner retina")
        for j in range(cols):
            # Half-ellipse elevation profile; >= 1 px so the lateral extent is exact.
            rel = (j + 0.5 - cols / 2.0) / (cols / 2.0)
            elev = max(1, round(bump_h * float(np.sqrt(max(0.0, 1.0 - rel * rel)))))
            col = start + j
            top = rpe_top - elev
            canvas[top : top + rpe_px, col] = _RPE
            canvas[top + rpe_px : rows["rpe_bottom"], col] = _DRUSE
            mask[top : rows["rpe_bottom"], col] = MASK_DRUSEN


def _draw_atrophy(canvas, mask, latents, geometry, rows, center_col) -> None:
    width_px = round(latents.atrophy_width_um / geometry.pixel_width_um)
    width_px = max(1, width_px)
    left = round(center_col - width_px / 2.0)
    right = left + width_px
    if left < 0 or right > geometry.width:
        raise RenderBoundsError(
            f"atrophy of width {width_px} px exceeds image width {geometry.width}"
        )
    # Photoreceptor/RPE loss, then choroidal hypertransmission down to the bottom edge.
    canvas[rows["ellipsoid"] : rows["rpe_bottom"], left:right] = _ATROPHY_GAP
    canvas[rows["rpe_bottom"] :, left:right] = np.maximum(
        canvas[rows["rpe_bottom"] :, left:right], _HYPERTRANSMISSION
    )
    mask[rows["ellipsoid"] :, left:right] = MASK_ATROPHY


def _ellipse(canvas, mask, center_rc, semi_axes, value, code, upper_half_only=False):
    cr, cc = center_rc
    ry, rx = semi_axes
    h, w = canvas.shape
    r0, r1 = int(np.floor(cr - ry)), int(np.ceil(cr + ry)) + 1
    c0, c1 = int(np.floor(cc - rx)), int(np.ceil(cc + rx)) + 1
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise RenderBoundsError("lesion ellipse exceeds image bounds")
    rr, cc_grid = np.mgrid[r0:r1, c0:c1]
    inside = ((rr - cr) / ry) ** 2 + ((cc_grid - cc) / rx) ** 2 <= 1.0
    if upper_half_only:
        inside &= rr <= cr
    canvas[r0:r1, c0:c1][inside] = value
    mask[r0:r1, c0:c1][inside] = code


def _draw_fluid(canvas, mask, latents, geometry, rows, center_col) -> None:
    ry = max(2.0, 0.05 * geometry.height)
    rx = max(3.0, 0.09 * geometry.width)
    if latents.fluid_type == FluidType.SUBRETINAL:
        center_row = rows["rpe_top"] - ry - 1
    else:
        center_row = (rows["opl"] + rows["ellipsoid"]) / 2.0
    _ellipse(canvas, mask, (center_row, center_col), (ry, rx), _FLUID, MASK_FLUID)


def _draw_scar(canvas, mask, geometry, rows, center_col) -> None:
    ry = max(3.0, 0.09 * geometry.height)
    rx = max(4.0, 0.12 * geometry.width)
    _ellipse(
        canvas,
        mask,
        (rows["rpe_top"], center_col),
        (ry, rx),
        _SCAR,
        MASK_SCAR,
        upper_half_only=True,
    )


def render_bscan(
    latents: LatentFactors,
    noise_seed: int,
    geometry: ImageGeometry | None = None,
    speckle_sigma: float = 4.0,
) -> RenderedBScan:
    """Render one B-scan and its structure mask.

    Deterministic given (latents, noise_seed): the structure content, including
    the mask, depends on latents only; noise_seed drives speckle alone.
    Raises RenderBoundsError when a structure does not fit the raster.
    """
    latents.validate()
    geometry = geometry or ImageGeometry()
    geometry.validate()

    rows = _band_rows(geometry)
    choroid_px = round(latents.choroid_thickness_um / geometry.pixel_height_um)
    if rows["rpe_bottom"] + choroid_px > geometry.height:
        raise RenderBoundsError("choroid band extends below the image")

    canvas = np.empty((geometry.height, geometry.width), dtype=np.float64)
    mask = np.zeros_like(canvas, dtype=np.uint8)
    _draw_bands(canvas, rows, choroid_px)

    center_col = geometry.width / 2.0 + latents.fovea_offset_px
    if not 0 <= center_col < geometry.width:
        raise RenderBoundsError("fovea offset places the fovea outside the image")

    if latents.atrophy_width_um > 0:
        _draw_atrophy(canvas, mask, latents, geometry, rows, center_col)
    if latents.drusen_count > 0:
        _draw_drusen(canvas, mask, latents, geometry, rows, center_col)
    if latents.scar:
        _draw_scar(canvas, mask, geometry, rows, center_col)
    if latents.fluid_type != FluidType.NONE:
        _draw_fluid(canvas, mask, latents, geometry, rows, center_col)

    if latents.rotation_deg != 0.0:
        canvas = ndimage.rotate(
            canvas, latents.rotation_deg, reshape=False, order=1, mode="nearest"
        )
        mask = ndimage.rotate(
            mask, latents.rotation_deg, reshape=False, order=0, mode="constant", cval=MASK_NONE
        )

    canvas = canvas * latents.contrast_scale + latents.brightness_offset
    if speckle_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        canvas = canvas + rng.normal(0.0, speckle_sigma, size=canvas.shape)
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return RenderedBScan(image=image, structure_mask=mask)
