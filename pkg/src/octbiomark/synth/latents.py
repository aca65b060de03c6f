"""Latent biomarker factors, image geometry and the rule-based grading system."""

from dataclasses import dataclass
from enum import Enum


class FluidType(str, Enum):
    NONE = "none"
    INTRARETINAL = "intraretinal"
    SUBRETINAL = "subretinal"


class GradingLabel(str, Enum):
    HEALTHY = "healthy"
    EARLY_INTERMEDIATE = "early_intermediate"
    MNV = "mnv"
    CRORA_SMALL = "crora_small"
    CRORA_LARGE = "crora_large"


# Canonical column order for one-hot encodings and conditional-probability tables.
GRADING_LABELS = (
    GradingLabel.HEALTHY,
    GradingLabel.EARLY_INTERMEDIATE,
    GradingLabel.MNV,
    GradingLabel.CRORA_SMALL,
    GradingLabel.CRORA_LARGE,
)

# Grading thresholds in micrometres.
DRUSEN_DIAMETER_MIN_UM = 63.0
CRORA_SMALL_MIN_UM = 250.0
CRORA_LARGE_MIN_UM = 1000.0


@dataclass(frozen=True)
class ImageGeometry:
    """B-scan raster geometry: pixel counts and physical pixel pitch."""

    height: int = 208
    width: int = 256
    pixel_height_um: float = 7.0
    pixel_width_um: float = 23.4

    @classmethod
    def scaled(cls, height: int, width: int) -> "ImageGeometry":
        """Geometry at a different raster size covering the same physical extent."""
        base = cls()
        return cls(
            height=height,
            width=width,
            pixel_height_um=base.height * base.pixel_height_um / height,
            pixel_width_um=base.width * base.pixel_width_um / width,
        )

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError("geometry must have positive pixel counts")
        if self.pixel_height_um <= 0 or self.pixel_width_um <= 0:
            raise ValueError("pixel pitch must be positive")


@dataclass(frozen=True)
class LatentFactors:
    """Ground-truth factors behind one rendered B-scan.

    Pathological factors (drusen, fluid, atrophy, scar, choroid) determine the
    structures drawn into the image; the remaining fields are nuisance factors
    the feature extractor is expected to ignore.
    """

    drusen_count: int = 0
    drusen_diameter_um: float = 0.0
    fluid_type: FluidType = FluidType.NONE
    atrophy_width_um: float = 0.0
    choroid_thickness_um: float = 250.0
    scar: bool = False
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    fovea_offset_px: float = 0.0
    rotation_deg: float = 0.0

    def validate(self) -> None:
        if self.drusen_count < 0:
            raise ValueError("drusen_count must be >= 0")
        if self.drusen_diameter_um < 0:
            raise ValueError("drusen_diameter_um must be >= 0")
        if self.atrophy_width_um < 0:
            raise ValueError("atrophy_width_um must be >= 0")
        if self.choroid_thickness_um <= 0:
            raise ValueError("choroid_thickness_um must be > 0")
        if self.contrast_scale <= 0:
            raise ValueError("contrast_scale must be > 0")
        if not isinstance(self.fluid_type, FluidType):
            raise ValueError(f"invalid fluid_type: {self.fluid_type!r}")


def derive_grading(latents: LatentFactors) -> GradingLabel:
    """Map latent factors to the rule-based grading label.

    Total and deterministic. Late features override drusen; atrophy (cRORA)
    overrides MNV only when no fluid is present.
    """
    if latents.atrophy_width_um >= CRORA_SMALL_MIN_UM and latents.fluid_type == FluidType.NONE:
        if latents.atrophy_width_um >= CRORA_LARGE_MIN_UM:
            return GradingLabel.CRORA_LARGE
        return GradingLabel.CRORA_SMALL
    if latents.fluid_type != FluidType.NONE or latents.scar:
        return GradingLabel.MNV
    if latents.drusen_count >= 1 and latents.drusen_diameter_um >= DRUSEN_DIAMETER_MIN_UM:
        return GradingLabel.EARLY_INTERMEDIATE
    return GradingLabel.HEALTHY
