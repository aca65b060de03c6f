"""Feature extraction and the on-disk vector store.

Features are the encoder's pooled activations from just before its final
linear layer, one row per image. The store is a single binary file (header,
row-major float32 payload, sha256 trailer) with a newline-delimited id
sidecar, so a saved matrix round-trips bit for bit.
"""

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

MAGIC = b"OBFS"
FORMAT_VERSION = 1
_FLAG_NORMALIZED = 0x1
_HEADER = struct.Struct("<4sHHQQ64s")  # magic, version, flags, N, D, fingerprint


class ChecksumError(ValueError):
    """Stored payload does not match its recorded checksum."""


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # N x D float32
    image_ids: tuple[str, ...]
    encoder_fingerprint: str  # hex sha256 of the checkpoint file
    normalized: bool = False

    def validate(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D matrix")
        if self.values.shape[0] != len(self.image_ids):
            raise ValueError("row count does not match id count")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image ids must be unique")
        if not self.encoder_fingerprint:
            raise ValueError("encoder fingerprint is required")
        if len(self.encoder_fingerprint) > 64 or not self.encoder_fingerprint.isascii():
            raise ValueError("encoder fingerprint must be <= 64 ASCII characters")
        if self.values.dtype != np.float32:
            raise ValueError("values must be float32")


def checkpoint_fingerprint(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def extract_features(
    encoder,
    images,
    image_ids,
    encoder_fingerprint: str,
    batch_size: int = 256,
) -> FeatureMatrix:
    """Deterministic, augmentation-free forward pass over uint8 images."""
    images = list(images)
    image_ids = tuple(image_ids)
    if len(images) != len(image_ids):
        raise ValueError("images and image_ids differ in length")
    expected = encoder.spec.input_size
    for img in images:
        if img.shape != expected:
            raise ValueError(f"image shape {img.shape} does not match encoder input {expected}")
    encoder.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.stack(images[start : start + batch_size]).astype(np.float32) / 255.0
            x = torch.from_numpy(chunk).unsqueeze(1)
            rows.append(encoder.forward_features(x).numpy())
    values = (
        np.concatenate(rows).astype(np.float32)
        if rows
        else np.zeros((0, encoder.spec.feature_dim), np.float32)
    )
    matrix = FeatureMatrix(values, image_ids, encoder_fingerprint)
    matrix.validate()
    return matrix


def l2_normalize(matrix: FeatureMatrix) -> FeatureMatrix:
    norms = np.linalg.norm(matrix.values, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero feature row")
    return replace(
        matrix,
        values=(matrix.values / norms).astype(np.float32),
        normalized=True,
    )


def save(matrix: FeatureMatrix, path: Path) -> None:
    """Write <path> (binary features) and <path>.ids (newline-delimited ids).

    Canonical: saving an identical matrix yields byte-identical files.
    """
    matrix.validate()
    path = Path(path)
    n, d = matrix.values.shape
    flags = _FLAG_NORMALIZED if matrix.normalized else 0
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, flags, n, d,
        matrix.encoder_fingerprint.encode("ascii").ljust(64, b"\0"),
    )
    payload = np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    digest = hashlib.sha256(header + payload).digest()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload + digest)
    tmp.replace(path)
    ids_tmp = path.with_name(path.name + ".ids.tmp")
    ids_tmp.write_text("\n".join(matrix.image_ids) + "\n", encoding="utf-8")
    ids_tmp.replace(path.with_name(path.name + ".ids"))


def load(path: Path) -> FeatureMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size + 32:
        raise ChecksumError(f"{path}: file truncated")
    header, payload, digest = blob[: _HEADER.size], blob[_HEADER.size : -32], blob[-32:]
    magic, version, flags, n, d, fp_raw = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a feature store file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if hashlib.sha256(header + payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    if len(payload) != n * d * 4:
        raise ChecksumError(f"{path}: payload size does not match header")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    fingerprint = fp_raw.rstrip(b"\0").decode("ascii")
    ids_path = path.with_name(path.name + ".ids")
    if not ids_path.exists():
        raise ValueError(f"{path}: missing id sidecar {ids_path.name}")
    image_ids = tuple(ids_path.read_text(encoding="utf-8").splitlines())
    matrix = FeatureMatrix(values, image_ids, fingerprint, bool(flags & _FLAG_NORMALIZED))
    matrix.validate()
    return matrix
