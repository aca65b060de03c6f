"""Review session protocol: stage legality, reveal draws, consensus, replay."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from octbiomark.review import (
    ClusterCatalog,
    DescriptionSet,
    ReviewService,
    Stage,
    StageError,
)
from octbiomark.review.api import create_app


def make_catalog(k=3, images_per_cluster=24, patients_per_cluster=24):
    """Synthetic membership table. With the defaults every cluster clears the
    full-protocol thresholds (>= 20 images from >= 20 patients)."""
    assignments = {}
    patient_of = {}
    argmax = {}
    labels = ["healthy", "drusen", "ga", "healthy", "mnv"]
    for c in range(k):
        for i in range(images_per_cluster):
            image_id = f"c{c}i{i:03d}"
            assignments[image_id] = c
            patient_of[image_id] = f"c{c}p{i % patients_per_cluster:03d}"
        argmax[c] = labels[c % len(labels)]
    return ClusterCatalog(
        assignments=assignments, patient_of=patient_of, k=k, conditional_argmax=argmax
    )


def drive_cluster(service, session_id, cluster, terms=("drusen",), decision="confirm"):
    service.reveal_initial(session_id, cluster)
    service.submit_descriptions(session_id, cluster, DescriptionSet(terms=terms))
    service.reveal_validation(session_id, cluster)
    service.finalize_cluster(session_id, cluster, decision)


def finish_session(service, session_id, terms=("drusen",)):
    state = service.get_session(session_id)
    for cluster in sorted(state.clusters):
        drive_cluster(service, session_id, cluster, terms=terms)


# ---- stage machine ----


def test_stage_progression():
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=7)
    review = state.clusters[0]
    assert review.stage == Stage.INITIAL_REVEAL

    service.reveal_initial(state.session_id, 0)
    assert review.stage == Stage.DESCRIBING

    service.submit_descriptions(state.session_id, 0, DescriptionSet(terms=("drusen",)))
    assert review.stage == Stage.VALIDATION_REVEAL

    service.reveal_validation(state.session_id, 0)
    assert review.stage == Stage.FINALIZE_PENDING

    final = service.finalize_cluster(state.session_id, 0, "confirm")
    assert review.stage == Stage.FINALIZED
    assert final.terms == ("drusen",)
    assert state.is_finished()


ACTIONS = ("reveal_initial", "submit", "reveal_validation", "finalize")
LEGAL_ACTION = {
    Stage.INITIAL_REVEAL: "reveal_initial",
    Stage.DESCRIBING: "submit",
    Stage.VALIDATION_REVEAL: "reveal_validation",
    Stage.FINALIZE_PENDING: "finalize",
    Stage.FINALIZED: None,
}


def perform(service, session_id, cluster, action):
    if action == "reveal_initial":
        service.reveal_initial(session_id, cluster)
    elif action == "submit":
        service.submit_descriptions(session_id, cluster, DescriptionSet(terms=("x",)))
    elif action == "reveal_validation":
        service.reveal_validation(session_id, cluster)
    else:
        service.finalize_cluster(session_id, cluster, "confirm")


@pytest.mark.parametrize("upto", range(5))
def test_illegal_actions_rejected_at_every_stage(upto):
    """Advance to a stage, then check every out-of-order action raises."""
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=3)
    steps = ["reveal_initial", "submit", "reveal_validation", "finalize"]
    for action in steps[:upto]:
        perform(service, state.session_id, 0, action)
    stage = state.clusters[0].stage
    legal = LEGAL_ACTION[stage]
    for action in ACTIONS:
        if action == legal:
            continue
        with pytest.raises(StageError):
            perform(service, state.session_id, 0, action)
    assert state.clusters[0].stage == stage


@settings(max_examples=60, deadline=None)
@given(
    actions=st.lists(st.sampled_from(ACTIONS), min_size=1, max_size=12),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_random_action_sequences_respect_stage_machine(actions, seed):
    """Whatever order actions arrive in, only the one legal action per stage
    succeeds and the stage advances exactly one step when it does."""
    order = [
        Stage.INITIAL_REVEAL,
        Stage.DESCRIBING,
        Stage.VALIDATION_REVEAL,
        Stage.FINALIZE_PENDING,
        Stage.FINALIZED,
    ]
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=seed)
    for action in actions:
        before = state.clusters[0].stage
        try:
            perform(service, state.session_id, 0, action)
        except StageError:
            assert action != LEGAL_ACTION[before]
            assert state.clusters[0].stage == before
        else:
            assert action == LEGAL_ACTION[before]
            after = state.clusters[0].stage
            assert order.index(after) == order.index(before) + 1


def test_unknown_cluster_and_session():
    service = ReviewService(make_catalog(k=2))
    state = service.create_session("team-a", "r1", seed=1)
    with pytest.raises(KeyError):
        service.reveal_initial(state.session_id, 5)
    with pytest.raises(KeyError):
        service.get_session("nope")


def test_duplicate_active_session_rejected():
    service = ReviewService(make_catalog(k=1))
    service.create_session("team-a", "r1", seed=1)
    with pytest.raises(ValueError, match="already has an active session"):
        service.create_session("team-a", "r1", seed=2)
    # a different team or a different round is fine
    service.create_session("team-b", "r1", seed=1)
    service.create_session("team-a", "r2", seed=1)


def test_next_cluster_walks_in_order():
    service = ReviewService(make_catalog(k=3))
    state = service.create_session("team-a", "r1", seed=5)
    assert state.next_cluster() == 0
    drive_cluster(service, state.session_id, 0)
    assert state.next_cluster() == 1
    drive_cluster(service, state.session_id, 1)
    drive_cluster(service, state.session_id, 2)
    assert state.next_cluster() is None


# ---- reveal draws ----


def test_initial_reveal_distinct_patients_and_deterministic():
    catalog = make_catalog(k=1, images_per_cluster=30, patients_per_cluster=30)
    service = ReviewService(catalog)
    state = service.create_session("team-a", "r1", seed=11)
    items = service.reveal_initial(state.session_id, 0)
    assert len(items) == 10
    assert len({it.patient_id for it in items}) == 10
    assert not state.clusters[0].degraded

    replay = ReviewService(catalog)
    again = replay.create_session("team-a", "r1", seed=11)
    assert replay.reveal_initial(again.session_id, 0) == items


def test_reveal_varies_with_seed():
    catalog = make_catalog(k=1, images_per_cluster=40, patients_per_cluster=40)
    draws = set()
    for seed in range(6):
        service = ReviewService(catalog)
        state = service.create_session("team-a", "r1", seed=seed)
        items = service.reveal_initial(state.session_id, 0)
        draws.add(tuple(it.image_id for it in items))
    assert len(draws) > 1


def test_validation_disjoint_from_initial():
    catalog = make_catalog(k=2, images_per_cluster=25, patients_per_cluster=25)
    for seed in range(50):
        service = ReviewService(catalog)
        state = service.create_session("team-a", "r1", seed=seed)
        for cluster in (0, 1):
            initial = service.reveal_initial(state.session_id, cluster)
            service.submit_descriptions(
                state.session_id, cluster, DescriptionSet(terms=("x",))
            )
            validation = service.reveal_validation(state.session_id, cluster)
            seen = {it.image_id for it in initial}
            assert seen.isdisjoint({it.image_id for it in validation})
            assert len(validation) == len(initial)


def test_small_cluster_degrades_to_half():
    catalog = make_catalog(k=1, images_per_cluster=8, patients_per_cluster=8)
    service = ReviewService(catalog)
    state = service.create_session("team-a", "r1", seed=0)
    items = service.reveal_initial(state.session_id, 0)
    assert len(items) == 4  # min(10, 8 // 2)
    assert state.clusters[0].degraded


def test_few_patients_relaxes_distinctness():
    # 22 images from only 6 patients: full reveal size is impossible from
    # distinct patients, so repeats are allowed and the review is flagged
    catalog = make_catalog(k=1, images_per_cluster=22, patients_per_cluster=6)
    service = ReviewService(catalog)
    state = service.create_session("team-a", "r1", seed=0)
    items = service.reveal_initial(state.session_id, 0)
    assert len(items) == 10
    assert len({it.patient_id for it in items}) == 6
    assert state.clusters[0].degraded


def test_cluster_too_small_to_review():
    catalog = make_catalog(k=1, images_per_cluster=1, patients_per_cluster=1)
    service = ReviewService(catalog)
    state = service.create_session("team-a", "r1", seed=0)
    with pytest.raises(StageError, match="too few images"):
        service.reveal_initial(state.session_id, 0)


# ---- descriptions and finalize ----


def test_description_set_validation():
    DescriptionSet(terms=("a",)).validate()
    DescriptionSet(terms=("a", "b", "c")).validate()
    DescriptionSet(heterogeneous=True).validate()
    with pytest.raises(ValueError, match="1-3 ranked terms"):
        DescriptionSet().validate()
    with pytest.raises(ValueError, match="at most 3"):
        DescriptionSet(terms=("a", "b", "c", "d")).validate()
    with pytest.raises(ValueError, match="no feature terms"):
        DescriptionSet(terms=("a",), heterogeneous=True).validate()
    with pytest.raises(ValueError, match="non-empty"):
        DescriptionSet(terms=("a", "  ")).validate()


def test_finalize_revise_archives_original():
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=2)
    service.reveal_initial(state.session_id, 0)
    service.submit_descriptions(state.session_id, 0, DescriptionSet(terms=("drusen",)))
    service.reveal_validation(state.session_id, 0)
    final = service.finalize_cluster(
        state.session_id, 0, "revise", DescriptionSet(terms=("ga", "drusen"))
    )
    review = state.clusters[0]
    assert final.terms == ("ga", "drusen")
    assert [s.terms for s in review.submissions] == [("drusen",), ("ga", "drusen")]
    assert review.final_decision == "revise"


def test_finalize_heterogeneous_overrides_terms():
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=2)
    service.reveal_initial(state.session_id, 0)
    service.submit_descriptions(state.session_id, 0, DescriptionSet(terms=("drusen",)))
    service.reveal_validation(state.session_id, 0)
    final = service.finalize_cluster(state.session_id, 0, "heterogeneous")
    assert final.heterogeneous
    assert final.terms == ()


def test_finalize_revise_requires_replacement():
    service = ReviewService(make_catalog(k=1))
    state = service.create_session("team-a", "r1", seed=2)
    service.reveal_initial(state.session_id, 0)
    service.submit_descriptions(state.session_id, 0, DescriptionSet(terms=("drusen",)))
    service.reveal_validation(state.session_id, 0)
    with pytest.raises(ValueError, match="replacement"):
        service.finalize_cluster(state.session_id, 0, "revise")
    with pytest.raises(ValueError, match="unknown finalize decision"):
        service.finalize_cluster(state.session_id, 0, "discard")


# ---- consensus ----


def run_round(service, round_id, terms_a, terms_b):
    a = service.create_session("team-a", round_id, seed=1)
    b = service.create_session("team-b", round_id, seed=2)
    finish_session(service, a.session_id, terms=terms_a)
    finish_session(service, b.session_id, terms=terms_b)
    return service.compute_consensus(round_id)


def test_consensus_agree_normalizes_case_and_spacing():
    service = ReviewService(make_catalog(k=1))
    records = run_round(service, "r1", terms_a=("Large  Drusen",), terms_b=("large drusen",))
    assert records[0].consensus == "agree"
    assert not records[0].pending_adjudication


def test_consensus_disagree_goes_to_adjudication():
    service = ReviewService(make_catalog(k=1))
    records = run_round(service, "r1", terms_a=("drusen",), terms_b=("ga",))
    assert records[0].consensus == "disagree"
    assert records[0].pending_adjudication


def test_consensus_heterogeneous_both_teams():
    service = ReviewService(make_catalog(k=1))
    a = service.create_session("team-a", "r1", seed=1)
    b = service.create_session("team-b", "r1", seed=2)
    for sid in (a.session_id, b.session_id):
        service.reveal_initial(sid, 0)
        service.submit_descriptions(sid, 0, DescriptionSet(terms=("x",)))
        service.reveal_validation(sid, 0)
        service.finalize_cluster(sid, 0, "heterogeneous")
    records = service.compute_consensus("r1")
    assert records[0].consensus == "heterogeneous"
    assert not records[0].pending_adjudication


def test_consensus_requires_two_finished_teams():
    service = ReviewService(make_catalog(k=1))
    a = service.create_session("team-a", "r1", seed=1)
    with pytest.raises(ValueError, match="exactly 2"):
        service.compute_consensus("r1")
    service.create_session("team-b", "r1", seed=2)
    finish_session(service, a.session_id)
    with pytest.raises(ValueError, match="not finalized"):
        service.compute_consensus("r1")


def test_adjudication_overrides_disagreement():
    service = ReviewService(make_catalog(k=1))
    records = run_round(service, "r1", terms_a=("drusen",), terms_b=("ga",))
    assert records[0].pending_adjudication
    service.adjudicate("r1", 0, "agree", "terms are synonyms at our site")
    records = service.compute_consensus("r1")
    assert records[0].consensus == "agree"
    assert not records[0].pending_adjudication
    assert records[0].curator_note == "terms are synonyms at our site"
    with pytest.raises(ValueError, match="invalid consensus"):
        service.adjudicate("r1", 0, "maybe", "")
    with pytest.raises(KeyError):
        service.adjudicate("r1", 9, "agree", "")


# ---- event log replay ----


def test_replay_reconstructs_sessions(tmp_path):
    catalog = make_catalog(k=2)
    service = ReviewService(catalog, log_dir=tmp_path / "events")
    a = service.create_session("team-a", "r1", seed=4)
    b = service.create_session("team-b", "r1", seed=9)
    finish_session(service, a.session_id, terms=("drusen",))
    drive_cluster(service, b.session_id, 0, terms=("ga",))
    service.reveal_initial(b.session_id, 1)  # b leaves cluster 1 mid-flight

    rebuilt = ReviewService(catalog, log_dir=tmp_path / "events")
    assert set(rebuilt.sessions) == {a.session_id, b.session_id}
    for sid in (a.session_id, b.session_id):
        old, new = service.sessions[sid], rebuilt.sessions[sid]
        for c in old.clusters:
            assert new.clusters[c].stage == old.clusters[c].stage
            assert new.clusters[c].initial == old.clusters[c].initial
            assert new.clusters[c].validation == old.clusters[c].validation
            assert new.clusters[c].final == old.clusters[c].final
    # mid-flight cluster resumes exactly where it stopped
    assert rebuilt.sessions[b.session_id].clusters[1].stage == Stage.DESCRIBING


def test_replay_restores_adjudications(tmp_path):
    catalog = make_catalog(k=1)
    service = ReviewService(catalog, log_dir=tmp_path / "events")
    run_round(service, "r1", terms_a=("drusen",), terms_b=("ga",))
    service.adjudicate("r1", 0, "disagree", "kept as disagreement")

    rebuilt = ReviewService(catalog, log_dir=tmp_path / "events")
    records = rebuilt.compute_consensus("r1")
    assert records[0].consensus == "disagree"
    assert records[0].curator_note == "kept as disagreement"


def test_event_log_is_jsonl(tmp_path):
    catalog = make_catalog(k=1)
    service = ReviewService(catalog, log_dir=tmp_path / "events")
    state = service.create_session("team-a", "r1", seed=0)
    drive_cluster(service, state.session_id, 0)
    log_path = tmp_path / "events" / f"{state.session_id}.events.jsonl"
    lines = log_path.read_text().strip().split("\n")
    kinds = [json.loads(line)["event"] for line in lines]
    assert kinds == [
        "session_created",
        "initial_revealed",
        "descriptions_submitted",
        "validation_revealed",
        "finalized",
    ]


# ---- HTTP API ----


@pytest.fixture()
def client(tmp_path):
    catalog = make_catalog(k=2)
    service = ReviewService(catalog, log_dir=tmp_path / "events")
    return TestClient(create_app(service))


def test_api_full_session(client):
    resp = client.post("/sessions", json={"team_id": "a", "round_id": "r", "seed": 1})
    assert resp.status_code == 201
    sid = resp.json()["session_id"]
    assert resp.json()["next_cluster"] == 0

    resp = client.post(f"/sessions/{sid}/clusters/0/reveal-initial")
    assert resp.status_code == 200
    items = resp.json()["items"]
    assert len(items) == 10
    assert {"image_id", "patient_id", "image_url", "attribution_url", "overlay_url"} <= set(
        items[0]
    )

    resp = client.post(f"/sessions/{sid}/clusters/0/descriptions", json={"terms": ["drusen"]})
    assert resp.json()["stage"] == "validation_reveal"
    resp = client.post(f"/sessions/{sid}/clusters/0/reveal-validation")
    assert resp.status_code == 200
    resp = client.post(f"/sessions/{sid}/clusters/0/finalize", json={"decision": "confirm"})
    assert resp.json()["final"] == {"terms": ["drusen"], "heterogeneous": False}

    resp = client.get(f"/sessions/{sid}/next")
    assert resp.json()["cluster"] == 1


def test_api_error_mapping(client):
    assert client.get("/sessions/missing").status_code == 404
    resp = client.post("/sessions", json={"team_id": "a", "round_id": "r", "seed": 1})
    sid = resp.json()["session_id"]
    # out-of-stage action -> 409
    assert client.post(f"/sessions/{sid}/clusters/0/descriptions", json={"terms": ["x"]}).status_code == 409
    client.post(f"/sessions/{sid}/clusters/0/reveal-initial")
    # invalid description payload -> 422
    assert client.post(f"/sessions/{sid}/clusters/0/descriptions", json={"terms": []}).status_code == 422
    assert (
        client.post(
            f"/sessions/{sid}/clusters/0/descriptions",
            json={"terms": ["a", "b", "c", "d"]},
        ).status_code
        == 422
    )
    # unknown cluster -> 404
    assert client.post(f"/sessions/{sid}/clusters/7/reveal-initial").status_code == 404
    # duplicate active session -> 422
    assert (
        client.post("/sessions", json={"team_id": "a", "round_id": "r", "seed": 2}).status_code
        == 422
    )


def test_api_adjudication_requires_curator_role(client):
    for team, seed in (("a", 1), ("b", 2)):
        resp = client.post("/sessions", json={"team_id": team, "round_id": "r", "seed": seed})
        sid = resp.json()["session_id"]
        for cluster in (0, 1):
            client.post(f"/sessions/{sid}/clusters/{cluster}/reveal-initial")
            client.post(
                f"/sessions/{sid}/clusters/{cluster}/descriptions",
                json={"terms": [f"term-{team}"]},
            )
            client.post(f"/sessions/{sid}/clusters/{cluster}/reveal-validation")
            client.post(f"/sessions/{sid}/clusters/{cluster}/finalize", json={"decision": "confirm"})

    resp = client.get("/rounds/r/consensus")
    assert resp.status_code == 200
    records = resp.json()["records"]
    assert all(r["consensus"] == "disagree" for r in records)

    body = {"consensus": "agree", "note": "resolved"}
    assert client.post("/rounds/r/clusters/0/adjudicate", json=body).status_code == 403
    resp = client.post("/rounds/r/clusters/0/adjudicate", json=body, headers={"x-role": "curator"})
    assert resp.status_code == 200
    records = client.get("/rounds/r/consensus").json()["records"]
    assert records[0]["consensus"] == "agree"
    assert records[1]["consensus"] == "disagree"


def test_api_related_clusters(client):
    resp = client.get("/clusters/0/related")
    assert resp.status_code == 200
    assert resp.json() == {"cluster": 0, "related": []}
    assert client.get("/clusters/9/related").status_code == 404


def test_api_media_routes(tmp_path):
    image_dir = tmp_path / "images"
    image_dir.mkdir()
    from PIL import Image

    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(image_dir / "img1.png")
    catalog = ClusterCatalog(
        assignments={"img1": 0},
        patient_of={"img1": "p1"},
        k=1,
        image_dir=image_dir,
    )
    client = TestClient(create_app(ReviewService(catalog)))
    resp = client.get("/media/images/img1.png")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"
    assert client.get("/media/images/missing.png").status_code == 404
    # traversal attempts never resolve outside the media root
    assert client.get("/media/images/..%2Fimg1.png").status_code == 404
    # attribution dir unconfigured
    assert client.get("/media/attributions/img1.png").status_code == 404
