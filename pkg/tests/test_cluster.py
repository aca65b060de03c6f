import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octbiomark.cluster import (
    ClusterModel,
    GRADING_LABELS,
    assign,
    assign_many,
    cluster_summaries,
    conditional_probabilities,
    default_temperature,
    export_conditional_tsv,
    export_stats_tsv,
    kmeans_fit,
    load_model,
    reorder_by_va,
    save_model,
    similarity_matrix,
    similarity_vector,
)


def brute_force_partition_sse(x: np.ndarray, k: int) -> float:
    """Minimum SSE over all assignments of n points to k groups."""
    n = x.shape[0]
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        sse = 0.0
        for j in range(k):
            members = x[np.array(labels) == j]
            if len(members):
                sse += ((members - members.mean(axis=0)) ** 2).sum()
        best = min(best, sse)
    return best


def test_matches_brute_force_on_separated_blobs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(4, 9))
        centers = np.array([[0.0, 0.0], [10.0, 10.0]])
        labels = rng.integers(0, 2, size=n)
        x = centers[labels] + rng.normal(scale=0.5, size=(n, 2))
        result = kmeans_fit(x, k=2, seed=1, restarts=10)
        optimum = brute_force_partition_sse(x, 2)
        assert result.inertia == pytest.approx(optimum, rel=1e-9, abs=1e-9)


def test_inertia_trace_non_increasing():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 4))
    result = kmeans_fit(x, k=5, seed=0, restarts=3)
    trace = result.inertia_trace
    assert trace
    for a, b in zip(trace, trace[1:]):
        assert b <= a * (1 + 1e-9) + 1e-9


def test_deterministic_given_seed():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 3))
    a = kmeans_fit(x, k=4, seed=9)
    b = kmeans_fit(x, k=4, seed=9)
    assert np.array_equal(a.assignments, b.assignments)
    assert np.array_equal(a.model.centroids, b.model.centroids)


def test_n_equals_k_gives_zero_inertia():
    x = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    result = kmeans_fit(x, k=3, seed=0)
    assert result.inertia == 0.0
    assert sorted(result.assignments.tolist()) == [0, 1, 2]


def test_degenerate_duplicate_points_still_terminate():
    x = np.array([[0.0, 0.0]] * 4 + [[9.0, 9.0]] * 4)
    result = kmeans_fit(x, k=3, seed=0)
    assert np.isfinite(result.inertia)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    assert len(set(result.assignments.tolist())) <= 3


def test_ties_resolve_to_lowest_raw_index():
    centroids = np.array([[0.0, 0.0], [2.0, 0.0]])
    model = ClusterModel(centroids, np.array([0, 1]), "fp")
    # (1, 0) is equidistant to both centroids
    assert assign(model, np.array([1.0, 0.0])) == 0
    flipped = ClusterModel(centroids, np.array([1, 0]), "fp")
    assert assign(flipped, np.array([1.0, 0.0])) == 1


def test_assign_many_matches_assign():
    rng = np.random.default_rng(8)
    centroids = rng.normal(size=(4, 3))
    model = ClusterModel(centroids, np.array([2, 0, 3, 1]), "fp")
    rows = rng.normal(size=(10, 3))
    many = assign_many(model, rows)
    each = [assign(model, r) for r in rows]
    assert many.tolist() == each


def test_reorder_by_va_descending_median():
    assignments = np.array([0, 0, 1, 1, 2, 2])
    va = np.array([20.0, 30.0, 80.0, 90.0, 50.0, 60.0])
    perm = reorder_by_va(assignments, va, 3)
    # cluster 1 best vision -> display 0; cluster 2 -> 1; cluster 0 -> 2
    assert perm.tolist() == [2, 0, 1]


def test_reorder_nan_va_clusters_go_last():
    assignments = np.array([0, 1, 2])
    va = np.array([50.0, np.nan, 70.0])
    perm = reorder_by_va(assignments, va, 3)
    assert perm.tolist() == [1, 2, 0]


def test_reorder_breaks_ties_by_raw_index():
    assignments = np.array([0, 1])
    va = np.array([50.0, 50.0])
    perm = reorder_by_va(assignments, va, 2)
    assert perm.tolist() == [0, 1]


def test_reorder_requires_some_va():
    with pytest.raises(ValueError):
        reorder_by_va(np.array([0, 1]), np.array([np.nan, np.nan]), 2)


@given(seed=st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def test_reorder_matches_argsort_of_medians(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    n = int(rng.integers(k, 50))
    assignments = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    va = rng.uniform(5, 95, size=n)
    perm = reorder_by_va(assignments, va, k)
    medians = np.array([np.median(va[assignments == j]) for j in range(k)])
    # stable argsort of negated medians = display order by descending median
    expected_order = np.argsort(-medians, kind="stable")
    expected_perm = np.empty(k, dtype=int)
    expected_perm[expected_order] = np.arange(k)
    assert perm.tolist() == expected_perm.tolist()


def test_similarity_vector_simplex_and_ordering():
    centroids = np.array([[0.0, 0.0], [4.0, 0.0], [8.0, 0.0]])
    perm = np.array([2, 0, 1])  # raw 1 -> display 0
    model = ClusterModel(centroids, perm, "fp")
    sv = similarity_vector(model, np.array([4.0, 0.0]), temperature=1.0)
    assert sv.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert (sv.weights >= 0).all()
    # the nearest centroid is raw 1, shown at display position 0
    assert np.argmax(sv.weights) == 0


def test_similarity_matrix_rows_on_simplex():
    rng = np.random.default_rng(5)
    centroids = rng.normal(size=(6, 4))
    model = ClusterModel(centroids, np.arange(6), "fp")
    rows = rng.normal(size=(30, 4))
    sim = similarity_matrix(model, rows)
    assert sim.shape == (30, 6)
    assert np.allclose(sim.sum(axis=1), 1.0, atol=1e-9)
    assert (sim >= 0).all()


def test_default_temperature_is_median_intercentroid():
    centroids = np.array([[0.0], [1.0], [4.0]])
    model = ClusterModel(centroids, np.arange(3), "fp")
    # pairwise distances 1, 3, 4 -> median 3
    assert default_temperature(model) == pytest.approx(3.0)


def test_similarity_rejects_bad_temperature():
    model = ClusterModel(np.zeros((2, 2)), np.arange(2), "fp")
    with pytest.raises(ValueError):
        similarity_vector(model, np.zeros(2), temperature=0.0)


def test_conditional_rows_sum_to_one():
    assignments = np.array([0, 0, 1, 1, 1, 2])
    gradings = [
        "healthy",
        "early_intermediate",
        "mnv",
        "mnv",
        None,
        "healthy",
    ]
    matrix = conditional_probabilities(assignments, gradings, 4)
    for j in range(4):
        if matrix.has_labels[j]:
            assert matrix.values[j].sum() == pytest.approx(1.0, abs=1e-9)
        else:
            assert matrix.values[j].sum() == 0.0
    assert not matrix.has_labels[3]
    assert matrix.counts.tolist() == [2, 2, 1, 0]


def test_conditional_values():
    assignments = np.array([0, 0, 0, 0])
    gradings = ["healthy", "healthy", "healthy", "mnv"]
    matrix = conditional_probabilities(assignments, gradings, 1)
    healthy_col = GRADING_LABELS.index("healthy")
    mnv_col = GRADING_LABELS.index("mnv")
    assert matrix.values[0, healthy_col] == pytest.approx(0.75)
    assert matrix.values[0, mnv_col] == pytest.approx(0.25)


class _Visit:
    def __init__(self, image_id, patient_id, va):
        self.image_id = image_id
        self.patient_id = patient_id
        self.eye_id = patient_id + "E1"
        self.va_letters = va


class _Manifest:
    """Three patients, five images, known statistics."""

    def __init__(self):
        self.visits = [
            _Visit("a1", "PA", 80.0),
            _Visit("a2", "PA", 70.0),
            _Visit("b1", "PB", 60.0),
            _Visit("b2", "PB", 50.0),
            _Visit("c1", "PC", 40.0),
        ]

    def patient_of_image(self):
        return {v.image_id: v.patient_id for v in self.visits}


def test_cluster_summaries_hand_computed():
    manifest = _Manifest()
    image_ids = ["a1", "a2", "b1", "b2", "c1"]
    assignments = np.array([0, 0, 0, 1, 1])
    stats = cluster_summaries(assignments, image_ids, manifest, 2)

    s0 = stats[0]
    assert s0.display_index == 1
    assert s0.n_images == 3
    assert s0.n_patients == 2
    assert s0.ratio == pytest.approx(1.5)
    assert s0.va_median == pytest.approx(70.0)
    assert s0.va_mean == pytest.approx(70.0)
    sd = np.std([80.0, 70.0, 60.0], ddof=1)
    half = 1.96 * sd / np.sqrt(3)
    assert s0.va_ci_low == pytest.approx(70.0 - half)
    assert s0.va_ci_high == pytest.approx(70.0 + half)

    s1 = stats[1]
    assert s1.n_images == 2
    assert s1.n_patients == 2
    assert s1.ratio == pytest.approx(1.0)
    assert s1.va_median == pytest.approx(45.0)


def test_model_roundtrip_and_canonical_bytes(tmp_path):
    rng = np.random.default_rng(6)
    model = ClusterModel(rng.normal(size=(4, 5)), np.array([3, 1, 0, 2]), "deadbeef")
    path = tmp_path / "model.obcm"
    save_model(model, path)
    loaded = load_model(path)
    assert np.array_equal(loaded.centroids, model.centroids)
    assert np.array_equal(loaded.permutation, model.permutation)
    assert loaded.feature_fingerprint == "deadbeef"
    first = path.read_bytes()
    save_model(loaded, path)
    assert path.read_bytes() == first


def test_model_checksum_detects_corruption(tmp_path):
    model = ClusterModel(np.ones((2, 2)), np.arange(2), "fp")
    path = tmp_path / "model.obcm"
    save_model(model, path)
    blob = bytearray(path.read_bytes())
    blob[-40] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_model(path)


def test_export_tables_parse_back(tmp_path):
    assignments = np.array([0, 0, 1])
    gradings = ["healthy", "mnv", None]
    matrix = conditional_probabilities(assignments, gradings, 2)
    cond_path = tmp_path / "conditional.tsv"
    export_conditional_tsv(matrix, cond_path)
    lines = cond_path.read_text().splitlines()
    assert lines[0].startswith("Cluster\tLabelled\t")
    assert len(lines) == 3
    c2 = lines[2].split("\t")
    assert c2[0] == "C2" and c2[1] == "0" and c2[2] == "NA"

    manifest = _Manifest()
    stats = cluster_summaries(
        np.array([0, 0, 0, 1, 1]), ["a1", "a2", "b1", "b2", "c1"], manifest, 2
    )
    stats_path = tmp_path / "clusters.tsv"
    export_stats_tsv(stats, stats_path)
    rows = stats_path.read_text().splitlines()
    assert rows[0].split("\t")[0] == "Cluster"
    assert rows[1].split("\t")[1] == "3"


def test_kmeans_rejects_bad_input():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), k=5, seed=0)
    with pytest.raises(ValueError):
        kmeans_fit(np.array([[np.nan, 0.0]]), k=1, seed=0)
