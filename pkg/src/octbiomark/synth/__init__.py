from .latents import (
    ImageGeometry,
    LatentFactors,
    FluidType,
    GradingLabel,
    GRADING_LABELS,
    derive_grading,
)
from .render import RenderedBScan, RenderBoundsError, render_bscan
from .render import MASK_NONE, MASK_DRUSEN, MASK_FLUID, MASK_ATROPHY, MASK_SCAR
from .cohort import (
    ArchetypeSpec,
    CohortConfig,
    PatientRecord,
    VisitRecord,
    ConversionEvent,
    CohortManifest,
    CohortResult,
    generate_cohort,
    severity_to_va,
    derive_outcome_targets,
    save_manifest,
    load_manifest,
    DEFAULT_ARCHETYPES,
)

__all__ = [
    "ImageGeometry",
    "LatentFactors",
    "FluidType",
    "GradingLabel",
    "GRADING_LABELS",
    "derive_grading",
    "RenderedBScan",
    "RenderBoundsError",
    "render_bscan",
    "MASK_NONE",
    "MASK_DRUSEN",
    "MASK_FLUID",
    "MASK_ATROPHY",
    "MASK_SCAR",
    "ArchetypeSpec",
    "CohortConfig",
    "PatientRecord",
    "VisitRecord",
    "ConversionEvent",
    "CohortManifest",
    "CohortResult",
    "generate_cohort",
    "severity_to_va",
    "derive_outcome_targets",
    "save_manifest",
    "load_manifest",
    "DEFAULT_ARCHETYPES",
]
