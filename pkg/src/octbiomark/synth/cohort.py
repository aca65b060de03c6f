"""Longitudinal synthetic cohort generation and outcome-target derivation.

Each eye follows an archetype with a scalar severity trajectory; severity
drives lesion magnitude, visual acuity and conversion to late disease, so the
generator doubles as a ground-truth oracle for clustering, attribution and
prognosis tests.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .latents import (
    FluidType,
    GradingLabel,
    ImageGeometry,
    LatentFactors,
    derive_grading,
)
from .render import RenderedBScan, render_bscan

MANIFEST_SCHEMA_VERSION = 1

# Rendered-class contribution to effective severity in the VA link.
_CLASS_VA_BONUS = {"healthy": 0.0, "drusen": 0.0, "fluid": 2.5, "atrophy": 2.0}

_SEVERITY_CAP = 9.0


@dataclass(frozen=True)
class ArchetypeSpec:
    """One disease archetype: a start class, an optional progression target,
    and the severity trajectory parameters sampled per eye."""

    name: str
    weight: float
    start_class: str  # healthy | drusen | fluid | atrophy
    base_severity: tuple[float, float] = (0.0, 0.5)
    progression_rate: tuple[float, float] = (0.0, 0.0)  # severity units per year
    end_class: str | None = None
    conversion_severity: float = 4.0

    def validate(self) -> None:
        if self.weight <= 0:
            raise ValueError(f"archetype {self.name}: weight must be > 0")
        for cls in (self.start_class, self.end_class):
            if cls is not None and cls not in _CLASS_VA_BONUS:
                raise ValueError(f"archetype {self.name}: unknown class {cls!r}")


DEFAULT_ARCHETYPES = (
    ArchetypeSpec("healthy", 0.25, "healthy", (0.0, 0.8)),
    ArchetypeSpec("drusen", 0.20, "drusen", (2.5, 5.0), (0.0, 0.3)),
    ArchetypeSpec("fluid", 0.15, "fluid", (2.5, 5.0), (0.0, 0.3)),
    ArchetypeSpec("atrophy", 0.15, "atrophy", (1.0, 5.0), (0.0, 0.3)),
    ArchetypeSpec("drusen_to_fluid", 0.15, "drusen", (2.0, 3.5), (0.6, 1.6), "fluid"),
    ArchetypeSpec("drusen_to_atrophy", 0.10, "drusen", (2.0, 3.5), (0.6, 1.6), "atrophy"),
)


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 50
    eyes_per_patient: int = 2
    visits_per_eye: int = 4
    visit_interval_years: float = 0.75
    archetypes: tuple[ArchetypeSpec, ...] = DEFAULT_ARCHETYPES
    image_size: tuple[int, int] = (208, 256)  # (height, width)
    age_range: tuple[float, float] = (51.0, 102.0)
    va_intercept: float = 95.0
    va_slope: float = 6.5
    va_noise_letters: float = 5.0
    speckle_sigma: float = 4.0
    brightness_range: tuple[float, float] = (-18.0, 18.0)
    contrast_range: tuple[float, float] = (0.85, 1.15)
    rotation_range: tuple[float, float] = (-8.0, 8.0)
    fovea_offset_frac: float = 0.04
    choroid_range_um: tuple[float, float] = (180.0, 330.0)

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.eyes_per_patient not in (1, 2):
            raise ValueError("eyes_per_patient must be 1 or 2")
        if self.visits_per_eye < 1:
            raise ValueError("visits_per_eye must be >= 1")
        if not self.archetypes:
            raise ValueError("archetype mixture must not be empty")
        for spec in self.archetypes:
            spec.validate()
        if self.va_noise_letters < 0:
            raise ValueError("va_noise_letters must be >= 0")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size too small to render layer bands")

    def geometry(self) -> ImageGeometry:
        h, w = self.image_size
        return ImageGeometry.scaled(h, w)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: float
    sex: str  # "F" | "M"


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    eye_id: str
    visit_time: float  # years from cohort start
    image_id: str
    va_letters: float
    latents: LatentFactors
    grading: GradingLabel
    rendered_class: str  # generator truth: structure class drawn into this image


@dataclass(frozen=True)
class ConversionEvent:
    eye_id: str
    target: str  # "mnv" | "crora"
    time_years: float


@dataclass
class CohortManifest:
    patients: list[PatientRecord]
    visits: list[VisitRecord]
    conversion_events: list[ConversionEvent]
    geometry: ImageGeometry = field(default_factory=ImageGeometry)

    def patient_of_image(self) -> dict[str, str]:
        return {v.image_id: v.patient_id for v in self.visits}

    def validate(self) -> None:
        ids = [v.image_id for v in self.visits]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        pids = [p.patient_id for p in self.patients]
        if len(set(pids)) != len(pids):
            raise ValueError("patient ids must be unique")
        eye_first_visit: dict[str, float] = {}
        for v in self.visits:
            if not 5.0 <= v.va_letters <= 95.0:
                raise ValueError(f"va_letters out of [5,95] for {v.image_id}")
            t = eye_first_visit.get(v.eye_id)
            eye_first_visit[v.eye_id] = v.visit_time if t is None else min(t, v.visit_time)
        known_eyes = {v.eye_id for v in self.visits}
        for ev in self.conversion_events:
            if ev.eye_id not in known_eyes:
                raise ValueError(f"conversion event references unknown eye {ev.eye_id}")
            if ev.time_years < eye_first_visit[ev.eye_id]:
                raise ValueError(f"conversion before first visit for eye {ev.eye_id}")


@dataclass
class CohortResult:
    manifest: CohortManifest
    renders: dict[str, RenderedBScan] | None  # populated when generating in memory


def severity_to_va(severity: float, intercept: float = 95.0, slope: float = 6.5) -> float:
    """The generator's noiseless severity-to-visual-acuity link (letters)."""
    return intercept - slope * severity


def _rendered_class(spec: ArchetypeSpec, severity: float) -> str:
    if spec.end_class is not None and severity >= spec.conversion_severity:
        return spec.end_class
    return spec.start_class


def _class_latents(cls: str, severity: float, choroid_um: float, fluid_kind: FluidType):
    s = min(severity, _SEVERITY_CAP)
    kwargs: dict = {"choroid_thickness_um": choroid_um}
    if cls == "drusen":
        kwargs["drusen_count"] = 2 + (1 if s >= 5.0 else 0)
        kwargs["drusen_diameter_um"] = 350.0 + 120.0 * s
    elif cls == "fluid":
        kwargs["fluid_type"] = fluid_kind
    elif cls == "atrophy":
        kwargs["atrophy_width_um"] = 500.0 + 300.0 * s
    elif cls != "healthy":
        raise ValueError(f"unknown rendered class {cls!r}")
    return kwargs


def generate_cohort(
    config: CohortConfig, seed: int, out_dir: Path | None = None
) -> CohortResult:
    """Generate a cohort deterministically from (config, seed).

    When out_dir is given, writes images/<id>.png, masks/<id>.mask.png and
    manifest.jsonl there; otherwise keeps the renders in memory.
    Per-patient randomness is derived from (seed, patient index), so the
    generation could be parallelized per patient without changing output.
    """
    config.validate()
    geometry = config.geometry()
    weights = np.array([a.weight for a in config.archetypes], dtype=float)
    weights = weights / weights.sum()

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    patients: list[PatientRecord] = []
    visits: list[VisitRecord] = []
    events: list[ConversionEvent] = []
    renders: dict[str, RenderedBScan] | None = {} if out_dir is None else None

    for p_idx in range(config.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p_idx]))
        patient_id = f"P{p_idx:04d}"
        age = float(rng.uniform(*config.age_range))
        sex = "F" if rng.random() < 0.5 else "M"
        patients.append(PatientRecord(patient_id, age, sex))

        for e_idx in range(config.eyes_per_patient):
            eye_id = f"{patient_id}E{e_idx + 1}"
            spec = config.archetypes[int(rng.choice(len(weights), p=weights))]
            base = float(rng.uniform(*spec.base_severity))
            rate = float(rng.uniform(*spec.progression_rate))
            choroid_um = float(rng.uniform(*config.choroid_range_um))
            fluid_kind = FluidType.SUBRETINAL if rng.random() < 0.5 else FluidType.INTRARETINAL
            seen_targets: set[str] = set()

            for v_idx in range(config.visits_per_eye):
                t = v_idx * config.visit_interval_years
                severity = min(base + rate * t, _SEVERITY_CAP)
                cls = _rendered_class(spec, severity)
                latents = LatentFactors(
                    brightness_offset=float(rng.uniform(*config.brightness_range)),
                    contrast_scale=float(rng.uniform(*config.contrast_range)),
                    rotation_deg=float(rng.uniform(*config.rotation_range)),
                    fovea_offset_px=float(
                        rng.uniform(-1.0, 1.0) * config.fovea_offset_frac * geometry.width
                    ),
                    **_class_latents(cls, severity, choroid_um, fluid_kind),
                )
                grading = derive_grading(latents)
                if grading == GradingLabel.MNV and "mnv" not in seen_targets:
                    seen_targets.add("mnv")
                    events.append(ConversionEvent(eye_id, "mnv", t))
                elif grading in (GradingLabel.CRORA_SMALL, GradingLabel.CRORA_LARGE):
                    if "crora" not in seen_targets:
                        seen_targets.add("crora")
                        events.append(ConversionEvent(eye_id, "crora", t))

                effective = severity + _CLASS_VA_BONUS[cls]
                va = severity_to_va(effective, config.va_intercept, config.va_slope)
                va += float(rng.normal(0.0, config.va_noise_letters))
                va = float(np.clip(va, 5.0, 95.0))

                image_id = f"{eye_id}V{v_idx:02d}"
                noise_seed = int(rng.integers(0, 2**31))
                rendered = render_bscan(
                    latents, noise_seed, geometry=geometry, speckle_sigma=config.speckle_sigma
                )
                if out_dir is not None:
                    Image.fromarray(rendered.image, mode="L").save(
                        out_dir / "images" / f"{image_id}.png"
                    )
                    Image.fromarray(rendered.structure_mask, mode="L").save(
                        out_dir / "masks" / f"{image_id}.mask.png"
                    )
                else:
                    renders[image_id] = rendered

                visits.append(
                    VisitRecord(
                        patient_id=patient_id,
                        eye_id=eye_id,
                        visit_time=t,
                        image_id=image_id,
                        va_letters=va,
                        latents=latents,
                        grading=grading,
                        rendered_class=cls,
                    )
                )

    manifest = CohortManifest(
        patients=patients, visits=visits, conversion_events=events, geometry=geometry
    )
    manifest.validate()
    if out_dir is not None:
        save_manifest(manifest, out_dir / "manifest.jsonl")
    return CohortResult(manifest=manifest, renders=renders)


def derive_outcome_targets(manifest: CohortManifest) -> dict[str, dict[str, float]]:
    """Per-image regression targets.

    Time-to-event targets cover only images strictly before an observed
    conversion of the relevant type; eyes without such an event contribute no
    rows to that target. time_to_late_amd uses the earliest event of any type.
    """
    mnv_time: dict[str, float] = {}
    crora_time: dict[str, float] = {}
    for ev in manifest.conversion_events:
        book = mnv_time if ev.target == "mnv" else crora_time
        if ev.eye_id not in book or ev.time_years < book[ev.eye_id]:
            book[ev.eye_id] = ev.time_years

    targets: dict[str, dict[str, float]] = {
        "time_to_late_amd": {},
        "time_to_mnv": {},
        "time_to_crora": {},
        "current_va": {},
    }
    for v in manifest.visits:
        targets["current_va"][v.image_id] = v.va_letters
        for name, book in (("time_to_mnv", mnv_time), ("time_to_crora", crora_time)):
            t_event = book.get(v.eye_id)
            if t_event is not None and v.visit_time < t_event:
                targets[name][v.image_id] = t_event - v.visit_time
        earliest = min(
            (t for t in (mnv_time.get(v.eye_id), crora_time.get(v.eye_id)) if t is not None),
            default=None,
        )
        if earliest is not None and v.visit_time < earliest:
            targets["time_to_late_amd"][v.image_id] = earliest - v.visit_time
    return targets


def _visit_to_record(v: VisitRecord) -> dict:
    rec = {
        "type": "visit",
        "patient_id": v.patient_id,
        "eye_id": v.eye_id,
        "visit_time_years": v.visit_time,
        "image_id": v.image_id,
        "va_letters": v.va_letters,
        "grading": v.grading.value,
        "rendered_class": v.rendered_class,
        "latents": {
            "drusen_count": v.latents.drusen_count,
            "drusen_diameter_um": v.latents.drusen_diameter_um,
            "fluid_type": v.latents.fluid_type.value,
            "atrophy_width_um": v.latents.atrophy_width_um,
            "choroid_thickness_um": v.latents.choroid_thickness_um,
            "scar": v.latents.scar,
            "brightness_offset": v.latents.brightness_offset,
            "contrast_scale": v.latents.contrast_scale,
            "fovea_offset_px": v.latents.fovea_offset_px,
            "rotation_deg": v.latents.rotation_deg,
        },
    }
    return rec


def save_manifest(manifest: CohortManifest, path: Path) -> None:
    """Write the manifest as canonical JSONL: header record, then one record
    per visit. Byte-identical for identical manifests."""
    path = Path(path)
    header = {
        "type": "header",
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "geometry": asdict(manifest.geometry),
        "patients": [asdict(p) for p in manifest.patients],
        "conversion_events": [
            {"eye_id": ev.eye_id, "target": ev.target, "time_years": ev.time_years}
            for ev in manifest.conversion_events
        ],
        "n_visits": len(manifest.visits),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.extend(
        json.dumps(_visit_to_record(v), sort_keys=True, separators=(",", ":"))
        for v in manifest.visits
    )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_manifest(path: Path) -> CohortManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: first record is not a manifest header")
        if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version")
        patients = [PatientRecord(**p) for p in header["patients"]]
        events = [
            ConversionEvent(ev["eye_id"], ev["target"], ev["time_years"])
            for ev in header["conversion_events"]
        ]
        geometry = ImageGeometry(**header["geometry"])
        visits = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") != "visit":
                raise ValueError(f"{path}: unexpected record type {rec.get('type')!r}")
            lat = rec["latents"]
            visits.append(
                VisitRecord(
                    patient_id=rec["patient_id"],
                    eye_id=rec["eye_id"],
                    visit_time=rec["visit_time_years"],
                    image_id=rec["image_id"],
                    va_letters=rec["va_letters"],
                    latents=LatentFactors(
                        drusen_count=lat["drusen_count"],
                        drusen_diameter_um=lat["drusen_diameter_um"],
                        fluid_type=FluidType(lat["fluid_type"]),
                        atrophy_width_um=lat["atrophy_width_um"],
                        choroid_thickness_um=lat["choroid_thickness_um"],
                        scar=lat["scar"],
                        brightness_offset=lat["brightness_offset"],
                        contrast_scale=lat["contrast_scale"],
                        fovea_offset_px=lat["fovea_offset_px"],
                        rotation_deg=lat["rotation_deg"],
                    ),
                    grading=GradingLabel(rec["grading"]),
                    rendered_class=rec["rendered_class"],
                )
            )
    manifest = CohortManifest(
        patients=patients, visits=visits, conversion_events=events, geometry=geometry
    )
    manifest.validate()
    return manifest
