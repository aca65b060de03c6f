"""Command-line pipeline driver.

Each subcommand runs one pipeline step against a run directory:

    synth -> train -> extract -> cluster -> attribute -> stats -> evaluate
                                                      \\-> serve

`synth` echoes the resolved configuration verbatim to <run-dir>/config.json;
every later step reads that echoed copy, so a run directory is self-contained.
Steps write completion markers with content fingerprints and refuse to run
when an upstream step is missing or its artifacts changed since it completed.

Exit codes: 0 success, 2 validation failure (bad arguments, bad config,
missing or stale upstream artifacts, held lock), 1 runtime failure.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import attribution as attribution_mod
from . import cluster as cluster_mod
from . import features as features_mod
from . import prognosis
from .config import RunConfig, load_config, save_config, with_seed
from .rundir import (
    RunDirError,
    config_path,
    require_step,
    run_lock,
    step_dir,
    write_marker,
)
from .ssl import byol
from .synth.cohort import generate_cohort, load_manifest, save_manifest

ENV_RUN_DIR = "OCTBIOMARK_RUN_DIR"
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


class CliError(Exception):
    """Argument or configuration problem; maps to the validation exit code."""


def _resolve_run_dir(args) -> Path:
    if args.run_dir is not None:
        return Path(args.run_dir)
    env = os.environ.get(ENV_RUN_DIR)
    if env:
        return Path(env)
    raise CliError(f"no run directory: pass --run-dir or set {ENV_RUN_DIR}")


def _load_run_config(run_dir: Path, args) -> RunConfig:
    """Read the config echoed by `synth`, cross-checking any overrides."""
    path = config_path(run_dir)
    if not path.exists():
        raise CliError(
            f"{path} not found; run `octbiomark synth` first to initialize the run"
        )
    try:
        config = load_config(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid config {path}: {exc}") from exc
    if args.config is not None:
        try:
            override = load_config(Path(args.config))
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"invalid config {args.config}: {exc}") from exc
        if override != config:
            raise CliError(
                f"--config {args.config} differs from the config this run was "
                f"created with ({path}); start a fresh run directory instead"
            )
    if args.seed is not None and args.seed != config.seed:
        raise CliError(
            f"--seed {args.seed} conflicts with the run's seed {config.seed}; "
            f"seeds are fixed when `synth` creates the run"
        )
    return config


def _initial_config(args, run_dir: Path) -> RunConfig:
    """Config for `synth`: --config wins, then the run's echoed config (so a
    rerun regenerates the same cohort), then built-in defaults."""
    source = args.config if args.config is not None else None
    if source is None and config_path(run_dir).exists():
        source = config_path(run_dir)
    if source is not None:
        try:
            config = load_config(Path(source))
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {source}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"invalid config {source}: {exc}") from exc
    else:
        config = RunConfig()
    if args.seed is not None:
        config = with_seed(config, args.seed)
    try:
        config.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return config


def _manifest_path(run_dir: Path) -> Path:
    return step_dir(run_dir, "synth") / "manifest.jsonl"


def _load_images(run_dir: Path, image_ids) -> dict[str, np.ndarray]:
    image_dir = step_dir(run_dir, "synth") / "images"
    out = {}
    for image_id in image_ids:
        path = image_dir / f"{image_id}.png"
        if not path.exists():
            raise RunDirError(
                f"image {path} is missing; rerun `octbiomark synth`"
            )
        out[image_id] = np.asarray(Image.open(path), dtype=np.uint8)
    return out


def _read_assignments(run_dir: Path) -> dict[str, int]:
    path = step_dir(run_dir, "cluster") / "assignments.tsv"
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    out = {}
    for row in rows:
        image_id, cluster = row.split("\t")
        out[image_id] = int(cluster)
    return out


# ---- steps ----


def cmd_synth(run_dir: Path, config: RunConfig) -> None:
    out = step_dir(run_dir, "synth")
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, config_path(run_dir))
    result = generate_cohort(config.synth, config.seed, out_dir=out)
    save_manifest(result.manifest, _manifest_path(run_dir))
    write_marker(
        run_dir,
        "synth",
        inputs={"config": config_path(run_dir)},
        outputs={
            "manifest": _manifest_path(run_dir),
            "images": out / "images",
            "masks": out / "masks",
        },
    )
    print(
        f"synth: {len(result.manifest.patients)} patients, "
        f"{len(result.manifest.visits)} images -> {out}"
    )


def cmd_train(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "synth")
    manifest = load_manifest(_manifest_path(run_dir))
    image_ids = [v.image_id for v in manifest.visits]
    images = _load_images(run_dir, image_ids)
    dataset = np.stack([images[i] for i in image_ids])
    result = byol.train(dataset, config.encoder, config.augment, config.train)
    out = step_dir(run_dir, "train")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "encoder.pt"
    byol.save_checkpoint(checkpoint, result.encoder, config.train, result.state.step)
    byol.save_loss_trace(out / "loss.tsv", result.loss_trace)
    write_marker(
        run_dir,
        "train",
        inputs={
            "config": config_path(run_dir),
            "manifest": _manifest_path(run_dir),
            "images": step_dir(run_dir, "synth") / "images",
        },
        outputs={"checkpoint": checkpoint, "loss_trace": out / "loss.tsv"},
    )
    print(f"train: {config.train.steps} steps, final loss {result.loss_trace[-1]:.4f}")


def cmd_extract(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "synth")
    require_step(run_dir, "train")
    manifest = load_manifest(_manifest_path(run_dir))
    visits = manifest.visits
    if config.labelled_only:
        visits = [v for v in visits if v.grading is not None]
    image_ids = [v.image_id for v in visits]
    images = _load_images(run_dir, image_ids)
    checkpoint = step_dir(run_dir, "train") / "encoder.pt"
    encoder, _, _ = byol.load_checkpoint(checkpoint)
    fingerprint = features_mod.checkpoint_fingerprint(checkpoint)
    matrix = features_mod.extract_features(
        encoder,
        [images[i] for i in image_ids],
        image_ids,
        encoder_fingerprint=fingerprint,
    )
    out = step_dir(run_dir, "extract")
    out.mkdir(parents=True, exist_ok=True)
    features_mod.save(matrix, out / "features.bin")
    write_marker(
        run_dir,
        "extract",
        inputs={
            "config": config_path(run_dir),
            "checkpoint": checkpoint,
            "manifest": _manifest_path(run_dir),
        },
        outputs={
            "features": out / "features.bin",
            "ids": out / "features.bin.ids",
        },
    )
    print(f"extract: {matrix.values.shape[0]} x {matrix.values.shape[1]} features")


def cmd_cluster(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "extract")
    checkpoint = step_dir(run_dir, "train") / "encoder.pt"
    matrix = features_mod.load(step_dir(run_dir, "extract") / "features.bin")
    if checkpoint.exists():
        current = features_mod.checkpoint_fingerprint(checkpoint)
        if current != matrix.encoder_fingerprint:
            raise RunDirError(
                "features were extracted with a different encoder checkpoint; "
                "rerun `octbiomark extract`"
            )
    manifest = load_manifest(_manifest_path(run_dir))
    va_of = {v.image_id: v.va_letters for v in manifest.visits}
    km = cluster_mod.kmeans_fit(matrix, config.k, config.seed, config.kmeans_restarts)
    va = np.array([va_of[i] for i in matrix.image_ids])
    perm = cluster_mod.reorder_by_va(km.assignments, va, config.k)
    model = cluster_mod.ClusterModel(
        centroids=km.model.centroids,
        permutation=perm,
        feature_fingerprint=km.model.feature_fingerprint,
    )
    out = step_dir(run_dir, "cluster")
    out.mkdir(parents=True, exist_ok=True)
    cluster_mod.save_model(model, out / "model.obcm")
    display = perm[km.assignments]
    lines = ["image_id\tcluster"]
    lines += [f"{i}\t{int(c)}" for i, c in zip(matrix.image_ids, display)]
    (out / "assignments.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    fit_info = {
        "inertia": km.inertia,
        "n_iter": km.n_iter,
        "k": config.k,
        "restarts": config.kmeans_restarts,
    }
    (out / "fit.json").write_text(
        json.dumps(fit_info, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_marker(
        run_dir,
        "cluster",
        inputs={
            "config": config_path(run_dir),
            "features": step_dir(run_dir, "extract") / "features.bin",
        },
        outputs={
            "model": out / "model.obcm",
            "assignments": out / "assignments.tsv",
            "fit": out / "fit.json",
        },
    )
    print(f"cluster: k={config.k}, inertia {km.inertia:.2f} after {km.n_iter} iterations")


def cmd_attribute(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "train")
    require_step(run_dir, "extract")
    require_step(run_dir, "cluster")
    matrix = features_mod.load(step_dir(run_dir, "extract") / "features.bin")
    assignments = _read_assignments(run_dir)
    assigned = np.array([assignments[i] for i in matrix.image_ids])
    probe = attribution_mod.fit_probe(
        matrix.values, assigned, config.k, config.probe_regularization
    )
    out = step_dir(run_dir, "attribute")
    out.mkdir(parents=True, exist_ok=True)
    attribution_mod.save_probe(probe, out / "probe.obpr")
    checkpoint = step_dir(run_dir, "train") / "encoder.pt"
    encoder, _, _ = byol.load_checkpoint(checkpoint)
    images = _load_images(run_dir, matrix.image_ids)
    written, failures = attribution_mod.batch_attribute(
        encoder, probe, images, assignments, out / "maps"
    )
    if failures:
        report = out / "failures.json"
        report.write_text(
            json.dumps(failures, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        print(f"attribute: {len(failures)} image(s) failed, see {report}", file=sys.stderr)
    write_marker(
        run_dir,
        "attribute",
        inputs={
            "config": config_path(run_dir),
            "features": step_dir(run_dir, "extract") / "features.bin",
            "assignments": step_dir(run_dir, "cluster") / "assignments.tsv",
            "checkpoint": checkpoint,
        },
        outputs={"probe": out / "probe.obpr", "maps": out / "maps"},
    )
    print(
        f"attribute: probe accuracy {probe.training_accuracy:.3f}, "
        f"{len(written)} files written"
    )


def cmd_stats(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "cluster")
    manifest = load_manifest(_manifest_path(run_dir))
    assignments = _read_assignments(run_dir)
    image_ids = sorted(assignments)
    assigned = np.array([assignments[i] for i in image_ids])
    grading_of = {v.image_id: v.grading.value for v in manifest.visits}
    gradings = [grading_of.get(i) for i in image_ids]
    matrix = cluster_mod.conditional_probabilities(assigned, gradings, config.k)
    out = step_dir(run_dir, "stats")
    out.mkdir(parents=True, exist_ok=True)
    cluster_mod.export_conditional_tsv(matrix, out / "conditional.tsv")
    summaries = cluster_mod.cluster_summaries(assigned, image_ids, manifest, config.k)
    cluster_mod.export_stats_tsv(summaries, out / "clusters.tsv")
    argmax = {
        str(j): matrix.labels[int(np.argmax(matrix.values[j]))]
        for j in range(config.k)
        if matrix.has_labels[j]
    }
    (out / "argmax.json").write_text(
        json.dumps(argmax, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_marker(
        run_dir,
        "stats",
        inputs={
            "config": config_path(run_dir),
            "assignments": step_dir(run_dir, "cluster") / "assignments.tsv",
            "manifest": _manifest_path(run_dir),
        },
        outputs={
            "conditional": out / "conditional.tsv",
            "clusters": out / "clusters.tsv",
            "argmax": out / "argmax.json",
        },
    )
    print(f"stats: {int(matrix.has_labels.sum())}/{config.k} clusters labelled")


def cmd_evaluate(run_dir: Path, config: RunConfig) -> None:
    require_step(run_dir, "extract")
    manifest = load_manifest(_manifest_path(run_dir))
    matrix = features_mod.load(step_dir(run_dir, "extract") / "features.bin")
    report = prognosis.run_benchmark(
        manifest,
        matrix,
        k=config.k,
        n_seeds=config.eval_seeds,
        n_folds=config.eval_folds,
        base_seed=config.seed,
        temperature=config.temperature,
        restarts=config.kmeans_restarts,
    )
    out = step_dir(run_dir, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    text = prognosis.render_report(report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    prognosis.export_report_tsv(report, out / "report.tsv")
    prognosis.export_seed_scores(report, out / "seed_scores.tsv")
    write_marker(
        run_dir,
        "evaluate",
        inputs={
            "config": config_path(run_dir),
            "features": step_dir(run_dir, "extract") / "features.bin",
            "manifest": _manifest_path(run_dir),
        },
        outputs={
            "report": out / "report.txt",
            "report_tsv": out / "report.tsv",
            "seed_scores": out / "seed_scores.tsv",
        },
    )
    print(text)


def cmd_serve(run_dir: Path, config: RunConfig, host: str, port: int) -> None:
    from .review.api import create_app
    from .review.core import ClusterCatalog, ReviewService

    require_step(run_dir, "cluster")
    require_step(run_dir, "stats")
    manifest = load_manifest(_manifest_path(run_dir))
    assignments = _read_assignments(run_dir)
    argmax_path = step_dir(run_dir, "stats") / "argmax.json"
    argmax = {
        int(c): label
        for c, label in json.loads(argmax_path.read_text(encoding="utf-8")).items()
    }
    attribution_dir = step_dir(run_dir, "attribute") / "maps"
    catalog = ClusterCatalog(
        assignments=assignments,
        patient_of=manifest.patient_of_image(),
        k=config.k,
        conditional_argmax=argmax,
        image_dir=step_dir(run_dir, "synth") / "images",
        attribution_dir=attribution_dir if attribution_dir.exists() else None,
    )
    service = ReviewService(catalog, log_dir=run_dir / "review" / "events")
    app = create_app(service)

    import uvicorn

    print(f"serving cluster review on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


# ---- entry point ----

_STEPS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "cluster": cmd_cluster,
    "attribute": cmd_attribute,
    "stats": cmd_stats,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octbiomark",
        description="self-supervised OCT biomarker pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate the synthetic cohort and initialize the run"),
        ("train", "train the self-supervised encoder"),
        ("extract", "extract features with the trained encoder"),
        ("cluster", "fit k-means and assign display clusters"),
        ("attribute", "fit the linear probe and write attribution maps"),
        ("stats", "export per-cluster statistics"),
        ("evaluate", "run the prognostic benchmark"),
        ("serve", "serve the cluster review API"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run-dir", help=f"run directory (default: ${ENV_RUN_DIR})")
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="run seed (fixed at synth time)")
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8700)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_dir = _resolve_run_dir(args)
        if args.command == "synth":
            config = _initial_config(args, run_dir)
            with run_lock(run_dir):
                cmd_synth(run_dir, config)
        elif args.command == "serve":
            config = _load_run_config(run_dir, args)
            cmd_serve(run_dir, config, args.host, args.port)
        else:
            config = _load_run_config(run_dir, args)
            with run_lock(run_dir):
                _STEPS[args.command](run_dir, config)
    except (CliError, RunDirError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort boundary for exit codes
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
