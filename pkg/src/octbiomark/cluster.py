"""k-means cluster engine and per-cluster statistics.

Fits Lloyd's algorithm with k-means++ restarts on the feature matrix, then
relabels clusters by descending median visual acuity so C1 is the best-vision
cluster. Also computes the soft cluster-similarity encoding, the
label-given-cluster conditional matrix, and per-cluster summary statistics.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .synth.latents import GRADING_LABELS

KMEANS_MAX_ITER = 300

# Lloyd's SSE is mathematically non-increasing; anything beyond fp noise is a bug.
_INERTIA_SLACK = 1e-9


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # k x D float64, raw k-means order
    permutation: np.ndarray  # permutation[raw_index] = display index (0-based)
    feature_fingerprint: str

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def validate(self) -> None:
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a k x D matrix")
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")
        if sorted(self.permutation.tolist()) != list(range(self.k)):
            raise ValueError("permutation must be a bijection on cluster indices")


@dataclass(frozen=True)
class SimilarityVector:
    weights: np.ndarray  # length k, display order, on the probability simplex
    temperature: float


@dataclass(frozen=True)
class ConditionalMatrix:
    """P(grading label | cluster); rows in display (VA) order."""

    values: np.ndarray  # k x L
    labels: tuple[str, ...]
    has_labels: np.ndarray  # per-row flag; False rows carry no labelled images
    counts: np.ndarray  # labelled images per cluster


@dataclass(frozen=True)
class ClusterStats:
    display_index: int  # 1-based, C1 = best vision
    n_images: int
    n_patients: int
    ratio: float
    va_median: float
    va_mean: float
    va_ci_low: float
    va_ci_high: float


@dataclass
class KMeansResult:
    model: ClusterModel
    assignments: np.ndarray  # raw cluster index per input row
    inertia: float
    n_iter: int
    inertia_trace: list[float] = field(default_factory=list)


def _pairwise_sq(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (
        np.einsum("nd,nd->n", x, x)[:, None]
        + np.einsum("kd,kd->k", c, c)[None, :]
        - 2.0 * (x @ c.T)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    closest = _pairwise_sq(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[j] = x[int(rng.integers(n))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            centroids[j] = x[min(idx, n - 1)]
        closest = np.minimum(closest, _pairwise_sq(x, centroids[j : j + 1]).ravel())
    return centroids


def _reseed_empty(
    x: np.ndarray, centroids: np.ndarray, labels: np.ndarray, d2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Move each empty cluster's centroid onto the point currently farthest
    from its assigned centroid, keeping k clusters populated."""
    k = centroids.shape[0]
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        point_cost = d2[np.arange(x.shape[0]), labels]
        far = int(np.argmax(point_cost))
        centroids[empty[0]] = x[far]
        d2 = _pairwise_sq(x, centroids)
        labels = np.argmin(d2, axis=1)
    return centroids, labels, d2


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    centroids = _kmeanspp_init(x, k, rng)
    prev_labels = None
    prev_inertia = np.inf
    trace: list[float] = []
    n_iter = 0
    for n_iter in range(1, KMEANS_MAX_ITER + 1):
        d2 = _pairwise_sq(x, centroids)
        labels = np.argmin(d2, axis=1)  # first occurrence keeps the lowest raw index on ties
        centroids, labels, d2 = _reseed_empty(x, centroids, labels, d2)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        for j in range(k):
            members = labels == j
            # a cluster can stay empty when x has fewer distinct points than
            # k; keep its centroid instead of averaging an empty slice
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        inertia = float(((x - centroids[labels]) ** 2).sum())
        assert inertia <= prev_inertia * (1.0 + _INERTIA_SLACK) + _INERTIA_SLACK, (
            f"inertia increased: {prev_inertia} -> {inertia}"
        )
        trace.append(inertia)
        prev_inertia = inertia
        prev_labels = labels
    labels = np.argmin(_pairwise_sq(x, centroids), axis=1)
    final = float(((x - centroids[labels]) ** 2).sum())
    return centroids, labels, final, n_iter, trace


def kmeans_fit(features, k: int, seed: int, restarts: int = 10) -> KMeansResult:
    """Best-of-restarts Lloyd with k-means++ init; deterministic given seed.

    Accepts a FeatureMatrix or a plain N x D array. The returned model carries
    the identity permutation; reorder_by_va supplies the display relabeling.
    """
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    fingerprint = getattr(features, "encoder_fingerprint", "")
    if x.ndim != 2:
        raise ValueError("features must be an N x D matrix")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} rows, got {x.shape[0]}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        centroids, labels, inertia, n_iter, trace = _lloyd(x, k, rng)
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia, n_iter, trace)
    centroids, labels, inertia, n_iter, trace = best
    model = ClusterModel(
        centroids=centroids,
        permutation=np.arange(k),
        feature_fingerprint=fingerprint,
    )
    model.validate()
    return KMeansResult(model, labels, inertia, n_iter, trace)


def _raw_assign(model: ClusterModel, rows: np.ndarray) -> np.ndarray:
    if rows.shape[-1] != model.centroids.shape[1]:
        raise ValueError(
            f"feature dimension {rows.shape[-1]} does not match centroids "
            f"{model.centroids.shape[1]}"
        )
    d2 = _pairwise_sq(np.atleast_2d(rows).astype(np.float64), model.centroids)
    return np.argmin(d2, axis=1)


def assign(model: ClusterModel, feature_row: np.ndarray) -> int:
    """Nearest centroid (ties -> lowest raw index), mapped to display order."""
    raw = _raw_assign(model, np.asarray(feature_row))
    return int(model.permutation[raw[0]])


def assign_many(model: ClusterModel, rows: np.ndarray) -> np.ndarray:
    return model.permutation[_raw_assign(model, np.asarray(rows))]


def default_temperature(model: ClusterModel) -> float:
    """Median distance between distinct centroids."""
    d2 = _pairwise_sq(model.centroids, model.centroids)
    iu = np.triu_indices(model.k, k=1)
    return float(np.median(np.sqrt(d2[iu])))


def similarity_vector(
    model: ClusterModel, feature_row: np.ndarray, temperature: float | None = None
) -> SimilarityVector:
    """softmax(-distance/temperature) over the k centroids, display order."""
    t = default_temperature(model) if temperature is None else float(temperature)
    if t <= 0:
        raise ValueError("temperature must be > 0")
    row = np.atleast_2d(np.asarray(feature_row, dtype=np.float64))
    d = np.sqrt(_pairwise_sq(row, model.centroids)).ravel()
    logits = -d / t
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    out = np.empty_like(w)
    out[model.permutation] = w
    return SimilarityVector(weights=out, temperature=t)


def similarity_matrix(
    model: ClusterModel, rows: np.ndarray, temperature: float | None = None
) -> np.ndarray:
    """Row-wise similarity vectors for an N x D matrix."""
    t = default_temperature(model) if temperature is None else float(temperature)
    if t <= 0:
        raise ValueError("temperature must be > 0")
    d = np.sqrt(_pairwise_sq(np.asarray(rows, dtype=np.float64), model.centroids))
    logits = -d / t
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = np.empty_like(w)
    out[:, model.permutation] = w
    return out


def reorder_by_va(
    raw_assignments: np.ndarray, va_letters: np.ndarray, k: int
) -> np.ndarray:
    """Permutation sending raw cluster indices to display order.

    Display order is descending median VA (C1 = best vision), median over
    images with a recorded VA (NaN = missing), ties broken by raw index,
    clusters with no VA data last.
    """
    raw_assignments = np.asarray(raw_assignments)
    va_letters = np.asarray(va_letters, dtype=np.float64)
    if raw_assignments.shape != va_letters.shape:
        raise ValueError("assignments and va_letters must align")
    if raw_assignments.size == 0:
        raise ValueError("no assignments given")
    keys = []
    for j in range(k):
        vals = va_letters[(raw_assignments == j) & ~np.isnan(va_letters)]
        if vals.size:
            keys.append((0, -float(np.median(vals)), j))
        else:
            keys.append((1, 0.0, j))
    if all(key[0] == 1 for key in keys):
        raise ValueError("no cluster has any VA data")
    order = [j for *_, j in sorted(keys)]
    permutation = np.empty(k, dtype=np.int64)
    for display, raw in enumerate(order):
        permutation[raw] = display
    return permutation


def inverse_permutation(permutation: np.ndarray) -> np.ndarray:
    inv = np.empty_like(permutation)
    inv[permutation] = np.arange(permutation.size)
    return inv


def apply_permutation(permutation: np.ndarray, raw_assignments: np.ndarray) -> np.ndarray:
    return np.asarray(permutation)[np.asarray(raw_assignments)]


def conditional_probabilities(
    assignments: np.ndarray,
    gradings,
    k: int,
    labels: tuple[str, ...] = GRADING_LABELS,
) -> ConditionalMatrix:
    """P(label | cluster) over labelled images; assignments in display order.

    gradings is aligned with assignments; None marks an unlabelled image.
    Clusters with no labelled images get a zero row with has_labels False.
    """
    assignments = np.asarray(assignments)
    gradings = list(gradings)
    if len(gradings) != assignments.shape[0]:
        raise ValueError("assignments and gradings must align")
    index = {label: i for i, label in enumerate(labels)}
    values = np.zeros((k, len(labels)), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for cluster, grading in zip(assignments, gradings):
        if grading is None:
            continue
        name = getattr(grading, "value", grading)
        values[cluster, index[name]] += 1
        counts[cluster] += 1
    has_labels = counts > 0
    values[has_labels] /= counts[has_labels, None]
    return ConditionalMatrix(values=values, labels=tuple(labels), has_labels=has_labels, counts=counts)


def cluster_summaries(
    assignments: np.ndarray,
    image_ids,
    manifest,
    k: int,
) -> list[ClusterStats]:
    """Per-cluster counts and VA statistics, display order.

    95% CI of the mean uses the normal approximation mean +- 1.96*sd/sqrt(n)
    with sample sd (ddof=1); singleton clusters collapse the CI to the mean.
    """
    assignments = np.asarray(assignments)
    image_ids = list(image_ids)
    if len(image_ids) != assignments.shape[0]:
        raise ValueError("assignments and image_ids must align")
    patient_of = manifest.patient_of_image()
    va_of = {v.image_id: v.va_letters for v in manifest.visits}
    missing = [i for i in image_ids if i not in patient_of]
    if missing:
        raise ValueError(f"manifest does not cover image ids, first missing: {missing[0]}")

    stats: list[ClusterStats] = []
    for j in range(k):
        members = [image_ids[i] for i in np.flatnonzero(assignments == j)]
        vas = np.array([va_of[m] for m in members], dtype=np.float64)
        n = len(members)
        n_patients = len({patient_of[m] for m in members})
        if n:
            mean = float(vas.mean())
            median = float(np.median(vas))
            if n > 1:
                half = 1.96 * float(vas.std(ddof=1)) / np.sqrt(n)
            else:
                half = 0.0
            ci = (mean - half, mean + half)
            ratio = n / n_patients
        else:
            mean = median = float("nan")
            ci = (float("nan"), float("nan"))
            ratio = float("nan")
        stats.append(
            ClusterStats(
                display_index=j + 1,
                n_images=n,
                n_patients=n_patients,
                ratio=ratio,
                va_median=median,
                va_mean=mean,
                va_ci_low=ci[0],
                va_ci_high=ci[1],
            )
        )
    return stats


MODEL_MAGIC = "obcm"
MODEL_VERSION = 1


def save_model(model: ClusterModel, path: Path) -> None:
    """JSON header line + raw float64 centroid block + sha256 trailer."""
    model.validate()
    header = json.dumps(
        {
            "magic": MODEL_MAGIC,
            "version": MODEL_VERSION,
            "k": model.k,
            "dim": int(model.centroids.shape[1]),
            "permutation": model.permutation.tolist(),
            "feature_fingerprint": model.feature_fingerprint,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("ascii") + b"\n"
    payload = np.ascontiguousarray(model.centroids, dtype="<f8").tobytes()
    digest = hashlib.sha256(header + payload).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload + digest)
    tmp.replace(path)


def load_model(path: Path) -> ClusterModel:
    blob = Path(path).read_bytes()
    newline = blob.index(b"\n")
    header = json.loads(blob[: newline + 1])
    if header.get("magic") != MODEL_MAGIC or header.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a cluster model file")
    payload = blob[newline + 1 : -32]
    if hashlib.sha256(blob[: newline + 1] + payload).digest() != blob[-32:]:
        raise ValueError(f"{path}: checksum mismatch")
    k, dim = header["k"], header["dim"]
    centroids = np.frombuffer(payload, dtype="<f8").reshape(k, dim).copy()
    model = ClusterModel(
        centroids=centroids,
        permutation=np.asarray(header["permutation"], dtype=np.int64),
        feature_fingerprint=header["feature_fingerprint"],
    )
    model.validate()
    return model


def export_conditional_tsv(matrix: ConditionalMatrix, path: Path) -> None:
    """Cluster-by-label probability table (display order, C1 first)."""
    lines = ["Cluster\tLabelled\t" + "\t".join(matrix.labels)]
    for j in range(matrix.values.shape[0]):
        if matrix.has_labels[j]:
            cells = [f"{v:.6f}" for v in matrix.values[j]]
        else:
            cells = ["NA"] * len(matrix.labels)
        lines.append(f"C{j + 1}\t{int(matrix.counts[j])}\t" + "\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_stats_tsv(stats: list[ClusterStats], path: Path) -> None:
    """Per-cluster table: image/patient counts and VA summaries."""
    lines = ["Cluster\t#Images\t#Patients\tRatio\tMedianVA\tMeanVA\tCI95Low\tCI95High"]
    for s in stats:
        if s.n_images:
            row = (
                f"C{s.display_index}\t{s.n_images}\t{s.n_patients}\t{s.ratio:.2f}\t"
                f"{s.va_median:.1f}\t{s.va_mean:.1f}\t{s.va_ci_low:.1f}\t{s.va_ci_high:.1f}"
            )
        else:
            row = f"C{s.display_index}\t0\t0\tNA\tNA\tNA\tNA\tNA"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
