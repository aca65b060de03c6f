"""Run-directory layout, completion markers, and the writer lock.

Each pipeline step owns one subfolder and records a completion marker with
sha256 fingerprints of the inputs it consumed and the outputs it produced.
Markers carry no timestamps, so rerunning a step with the same config and
seed rewrites byte-identical artifacts and markers. Downstream steps refuse
to run when an upstream marker is missing or when a recorded fingerprint no
longer matches the file on disk.
"""

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

STEP_ORDER = ("synth", "train", "extract", "cluster", "attribute", "stats", "evaluate")

# Command the operator must run to produce each step's artifacts.
_STEP_COMMAND = {step: f"octbiomark {step}" for step in STEP_ORDER}


class RunDirError(Exception):
    """Run-directory validation failure: missing step, stale artifact, lock held."""


def step_dir(run_dir: Path, step: str) -> Path:
    if step not in STEP_ORDER:
        raise ValueError(f"unknown step {step!r}")
    return Path(run_dir) / step


def marker_path(run_dir: Path, step: str) -> Path:
    if step not in STEP_ORDER:
        raise ValueError(f"unknown step {step!r}")
    return Path(run_dir) / "markers" / f"{step}.done"


def config_path(run_dir: Path) -> Path:
    return Path(run_dir) / "config.json"


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tree_sha256(root: Path) -> str:
    """Order-independent fingerprint of a directory: hash of (relpath, hash) pairs."""
    root = Path(root)
    entries = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        entries.append(f"{path.relative_to(root).as_posix()}\t{file_sha256(path)}")
    return hashlib.sha256("\n".join(entries).encode("ascii")).hexdigest()


def _fingerprint(path: Path) -> str:
    path = Path(path)
    if path.is_dir():
        return "tree:" + tree_sha256(path)
    return "file:" + file_sha256(path)


def write_marker(run_dir: Path, step: str, inputs: dict[str, Path], outputs: dict[str, Path]) -> None:
    """Record a completed step. Paths are stored relative to the run directory."""
    run_dir = Path(run_dir)

    def block(paths: dict[str, Path]) -> dict[str, dict[str, str]]:
        out = {}
        for name, path in paths.items():
            path = Path(path)
            if not path.exists():
                raise RunDirError(f"cannot record marker for {step!r}: {path} does not exist")
            out[name] = {
                "path": path.relative_to(run_dir).as_posix(),
                "sha256": _fingerprint(path),
            }
        return out

    payload = {
        "step": step,
        "schema_version": 1,
        "inputs": block(inputs),
        "outputs": block(outputs),
    }
    path = marker_path(run_dir, step)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_marker(run_dir: Path, step: str) -> dict:
    path = marker_path(run_dir, step)
    if not path.exists():
        raise RunDirError(
            f"step {step!r} has not completed in {Path(run_dir)}; "
            f"run `{_STEP_COMMAND[step]}` first"
        )
    return json.loads(path.read_text(encoding="utf-8"))


def is_complete(run_dir: Path, step: str) -> bool:
    return marker_path(run_dir, step).exists()


def require_step(run_dir: Path, step: str) -> dict:
    """Return the step's marker, verifying inputs and outputs are unchanged.

    A missing marker names the command to run. A fingerprint mismatch is a
    hard error: changed outputs mean the artifacts were touched after the
    step completed, changed inputs mean an upstream step (or the config) was
    rewritten and this step's artifacts no longer describe the current run.
    """
    run_dir = Path(run_dir)
    marker = read_marker(run_dir, step)
    for block, stale_hint in (
        ("outputs", f"Rerun `{_STEP_COMMAND[step]}` to regenerate it."),
        ("inputs", f"Step {step!r} is stale; rerun `{_STEP_COMMAND[step]}`."),
    ):
        for entry in marker[block].values():
            path = run_dir / entry["path"]
            if not path.exists():
                raise RunDirError(
                    f"artifact {entry['path']!r} recorded by step {step!r} is "
                    f"missing; rerun `{_STEP_COMMAND[step]}`"
                )
            if _fingerprint(path) != entry["sha256"]:
                raise RunDirError(
                    f"artifact {entry['path']!r} no longer matches the fingerprint "
                    f"recorded when step {step!r} completed; refusing to proceed. "
                    + stale_hint
                )
    return marker


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive writer lock for a run directory.

    Creation with O_EXCL is atomic on POSIX; a leftover lock from a crashed
    process must be removed by the operator (the error says where it is).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirError(
            f"run directory {run_dir} is locked by another command "
            f"(lock file {lock}); remove the file if no other process is running"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass
