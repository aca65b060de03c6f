"""Run configuration: one JSON document driving every pipeline step.

The config is validated on load and echoed verbatim into the run directory,
so a run directory alone reproduces its artifacts.
"""

import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

from .augment import AugmentConfig
from .ssl.byol import TrainConfig
from .ssl.encoder import EncoderSpec
from .synth.cohort import ArchetypeSpec, CohortConfig


def _desk_synth() -> CohortConfig:
    return CohortConfig(image_size=(64, 64))


def _desk_augment() -> AugmentConfig:
    return AugmentConfig(output_size=(64, 64))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k: int = 30
    temperature: float | None = None  # None -> median inter-centroid distance
    kmeans_restarts: int = 10
    probe_regularization: float = 1e-4
    eval_seeds: int = 7
    eval_folds: int = 10
    labelled_only: bool = True  # extract features for labelled images only
    synth: CohortConfig = field(default_factory=_desk_synth)
    augment: AugmentConfig = field(default_factory=_desk_augment)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")
        if self.eval_seeds < 1 or self.eval_folds < 2:
            raise ValueError("eval_seeds must be >= 1 and eval_folds >= 2")
        if self.probe_regularization < 0:
            raise ValueError("probe_regularization must be >= 0")
        self.synth.validate()
        self.augment.validate()
        self.encoder.validate()
        self.train.validate()
        sizes = {
            "synth.image_size": tuple(self.synth.image_size),
            "augment.output_size": tuple(self.augment.output_size),
            "encoder.input_size": tuple(self.encoder.input_size),
        }
        if len(set(sizes.values())) != 1:
            raise ValueError(f"image sizes disagree across stages: {sizes}")


def _tuplify(obj):
    if isinstance(obj, list):
        return tuple(_tuplify(v) for v in obj)
    return obj


def config_to_json(config: RunConfig) -> str:
    """Canonical JSON: identical configs serialize to identical bytes."""
    payload = asdict(config)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def config_from_json(text: str) -> RunConfig:
    obj = json.loads(text)
    synth_obj = obj.pop("synth")
    archetypes = tuple(
        ArchetypeSpec(
            name=a["name"],
            weight=a["weight"],
            start_class=a["start_class"],
            base_severity=tuple(a["base_severity"]),
            progression_rate=tuple(a["progression_rate"]),
            end_class=a["end_class"],
            conversion_severity=a["conversion_severity"],
        )
        for a in synth_obj.pop("archetypes")
    )
    synth = CohortConfig(
        archetypes=archetypes,
        **{key: _tuplify(value) for key, value in synth_obj.items()},
    )
    augment = AugmentConfig(**{k: _tuplify(v) for k, v in obj.pop("augment").items()})
    encoder = EncoderSpec(**{k: _tuplify(v) for k, v in obj.pop("encoder").items()})
    train = TrainConfig(**obj.pop("train"))
    config = RunConfig(synth=synth, augment=augment, encoder=encoder, train=train, **obj)
    config.validate()
    return config


def load_config(path: Path) -> RunConfig:
    return config_from_json(Path(path).read_text(encoding="utf-8"))


def save_config(config: RunConfig, path: Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(config_to_json(config), encoding="utf-8")
    tmp.replace(path)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Override the run seed, keeping the training seed in lockstep."""
    return replace(config, seed=seed, train=replace(config.train, seed=seed))
