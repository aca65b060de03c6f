"""Linear cluster probe and GradCAM attribution maps.

The probe is a single linear layer from feature space to cluster scores,
trained with a multinomial logistic objective. Attribution runs GradCAM
between an image and its cluster score over the encoder's final two conv
blocks, upsamples both maps to image resolution, averages them and
max-normalizes, yielding the heatmaps shown to reviewers.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.optimize import minimize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearProbe:
    weight: np.ndarray  # k x D; zero rows for clusters absent from training
    bias: np.ndarray  # k
    classes: tuple[int, ...]  # cluster indices that had training samples
    training_accuracy: float
    missing_clusters: tuple[int, ...] = ()

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        s = self.scores(features)
        mask = np.full(s.shape[1], -np.inf)
        mask[list(self.classes)] = 0.0
        return np.argmax(s + mask, axis=1)


def fit_probe(
    features: np.ndarray,
    assignments: np.ndarray,
    k: int,
    regularization: float = 1e-4,
    grad_tol: float = 1e-6,
    max_iter: int = 2000,
) -> LinearProbe:
    """Multinomial logistic probe, zero-initialized, L-BFGS to gradient-norm
    tolerance. Clusters without samples are reported and excluded from the
    class set; their probe rows stay zero."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(assignments)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features and assignments must align")
    counts = np.bincount(y, minlength=k)
    classes = tuple(int(c) for c in np.flatnonzero(counts > 0))
    missing = tuple(int(c) for c in np.flatnonzero(counts == 0))
    if missing:
        log.warning("probe: clusters without samples excluded: %s", missing)
    m = len(classes)
    remap = {c: i for i, c in enumerate(classes)}
    yc = np.array([remap[int(v)] for v in y])
    n, d = x.shape
    onehot = np.zeros((n, m))
    onehot[np.arange(n), yc] = 1.0

    def objective(theta):
        w = theta[: m * d].reshape(m, d)
        b = theta[m * d :]
        logits = x @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        nll = (logz - logits[np.arange(n), yc]).mean()
        probs = np.exp(logits - logz[:, None])
        grad_logits = (probs - onehot) / n
        gw = grad_logits.T @ x + regularization * w
        gb = grad_logits.sum(axis=0)
        val = nll + 0.5 * regularization * (w**2).sum()
        return val, np.concatenate([gw.ravel(), gb])

    theta0 = np.zeros(m * d + m)
    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": grad_tol, "ftol": 0.0},
    )
    w_small = res.x[: m * d].reshape(m, d)
    b_small = res.x[m * d :]
    weight = np.zeros((k, d))
    bias = np.zeros(k)
    for i, c in enumerate(classes):
        weight[c] = w_small[i]
        bias[c] = b_small[i]
    probe = LinearProbe(weight, bias, classes, 0.0, missing)
    accuracy = float((probe.predict(x) == y).mean())
    return LinearProbe(weight, bias, classes, accuracy, missing)


PROBE_MAGIC = "obpr"
PROBE_VERSION = 1


def save_probe(probe: LinearProbe, path: Path) -> None:
    """JSON header line + raw float64 weight and bias blocks + sha256 trailer."""
    k, d = probe.weight.shape
    header = json.dumps(
        {
            "magic": PROBE_MAGIC,
            "version": PROBE_VERSION,
            "k": k,
            "dim": d,
            "classes": list(probe.classes),
            "missing_clusters": list(probe.missing_clusters),
            "training_accuracy": probe.training_accuracy,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("ascii") + b"\n"
    payload = (
        np.ascontiguousarray(probe.weight, dtype="<f8").tobytes()
        + np.ascontiguousarray(probe.bias, dtype="<f8").tobytes()
    )
    digest = hashlib.sha256(header + payload).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload + digest)
    tmp.replace(path)


def load_probe(path: Path) -> LinearProbe:
    blob = Path(path).read_bytes()
    newline = blob.index(b"\n")
    header = json.loads(blob[: newline + 1])
    if header.get("magic") != PROBE_MAGIC or header.get("version") != PROBE_VERSION:
        raise ValueError(f"{path}: not a probe file")
    payload = blob[newline + 1 : -32]
    if hashlib.sha256(blob[: newline + 1] + payload).digest() != blob[-32:]:
        raise ValueError(f"{path}: checksum mismatch")
    k, d = header["k"], header["dim"]
    weight = np.frombuffer(payload[: k * d * 8], dtype="<f8").reshape(k, d).copy()
    bias = np.frombuffer(payload[k * d * 8 :], dtype="<f8").copy()
    return LinearProbe(
        weight=weight,
        bias=bias,
        classes=tuple(header["classes"]),
        training_accuracy=header["training_accuracy"],
        missing_clusters=tuple(header["missing_clusters"]),
    )


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # H x W in [0, 1]
    image_id: str
    cluster_index: int
    layers: tuple[str, ...]


def gradcam(
    encoder,
    probe: LinearProbe,
    image: np.ndarray,
    cluster_index: int,
    image_id: str = "",
    layers: tuple[str, str] | None = None,
) -> AttributionMap:
    """GradCAM of the probe's cluster score over two conv blocks.

    Per layer: channel weights are the spatial mean of d(score)/d(activation);
    the map is ReLU of the weighted channel sum. Layer maps are bilinearly
    upsampled to image size, averaged, then max-normalized (an all-zero map
    stays zero).
    """
    if not 0 <= cluster_index < probe.weight.shape[0]:
        raise IndexError(f"cluster index {cluster_index} out of range")
    if tuple(image.shape) != tuple(encoder.spec.input_size):
        raise ValueError(
            f"image shape {tuple(image.shape)} does not match encoder input "
            f"{tuple(encoder.spec.input_size)}"
        )
    layer_names = layers if layers is not None else encoder.spec.gradcam_layers
    h, w = image.shape
    x = torch.from_numpy(image.astype(np.float32) / 255.0)[None, None]
    encoder.eval()
    feats, acts = encoder.forward_with_activations(x, layer_names)
    weight = torch.from_numpy(probe.weight[cluster_index].astype(np.float32))
    score = (feats[0] * weight).sum() + float(probe.bias[cluster_index])
    grads = torch.autograd.grad(score, [acts[name] for name in layer_names], allow_unused=False)

    combined = torch.zeros(1, 1, h, w)
    for act, grad in zip((acts[n] for n in layer_names), grads):
        channel_w = grad.mean(dim=(2, 3))  # spatial mean per channel
        cam = F.relu((channel_w[:, :, None, None] * act).sum(dim=1, keepdim=True))
        combined += F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    combined /= len(layer_names)
    values = combined[0, 0].detach().numpy().astype(np.float64)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return AttributionMap(values, image_id, cluster_index, tuple(layer_names))


def save_map_png(amap: AttributionMap, path: Path) -> None:
    arr = np.clip(np.rint(amap.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path))


def save_overlay_png(image: np.ndarray, amap: AttributionMap, path: Path) -> None:
    """Red-tinted alpha blend of the map over the grayscale image."""
    base = image.astype(np.float64)
    heat = amap.values * 255.0
    r = np.clip(np.rint(0.6 * base + 0.4 * heat), 0, 255).astype(np.uint8)
    gb = np.clip(np.rint(0.6 * base), 0, 255).astype(np.uint8)
    rgb = np.stack([r, gb, gb], axis=-1)
    Image.fromarray(rgb, mode="RGB").save(Path(path))


def batch_attribute(
    encoder,
    probe: LinearProbe,
    images: dict[str, np.ndarray],
    assignments: dict[str, int],
    out_dir: Path,
) -> tuple[list[Path], dict[str, str]]:
    """One map per (image, assigned cluster): <id>.attr.png plus
    <id>.overlay.png. Failures are logged and returned, not raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    failures: dict[str, str] = {}
    for image_id in sorted(images):
        try:
            amap = gradcam(encoder, probe, images[image_id], assignments[image_id], image_id)
            map_path = out_dir / f"{image_id}.attr.png"
            save_map_png(amap, map_path)
            overlay_path = out_dir / f"{image_id}.overlay.png"
            save_overlay_png(images[image_id], amap, overlay_path)
            written.extend([map_path, overlay_path])
        except Exception as exc:  # noqa: BLE001 - per-image isolation is the contract
            log.warning("attribution failed for %s: %s", image_id, exc)
            failures[image_id] = str(exc)
    return written, failures
