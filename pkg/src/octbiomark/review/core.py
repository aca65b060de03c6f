"""Session protocol for expert cluster review.

Each cluster runs through a fixed five-stage machine per team session:

    initial_reveal -> describing -> validation_reveal -> finalize_pending -> finalized

A reveal shows up to 10 images (with attribution overlays) drawn
deterministically from the session seed, from distinct patients whenever the
cluster is large enough. After both teams finalize every cluster, consensus
is computed automatically on exact top-term matches and everything else goes
to a curator adjudication queue. All mutations append to a per-session event
log, so state rebuilds from disk by replay.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FULL_REVEAL_SIZE = 10
FULL_PROTOCOL_MIN_IMAGES = 20
FULL_PROTOCOL_MIN_PATIENTS = 20


class Stage(str, Enum):
    INITIAL_REVEAL = "initial_reveal"
    DESCRIBING = "describing"
    VALIDATION_REVEAL = "validation_reveal"
    FINALIZE_PENDING = "finalize_pending"
    FINALIZED = "finalized"


class StageError(RuntimeError):
    """Operation attempted outside its stage."""


@dataclass(frozen=True)
class DescriptionSet:
    terms: tuple[str, ...] = ()  # ranked: index 0 = most prevalent
    heterogeneous: bool = False

    def validate(self) -> None:
        if self.heterogeneous:
            if self.terms:
                raise ValueError("a heterogeneous cluster carries no feature terms")
            return
        if not self.terms:
            raise ValueError("submit 1-3 ranked terms or flag the cluster heterogeneous")
        if len(self.terms) > 3:
            raise ValueError(f"at most 3 ranked terms allowed, got {len(self.terms)}")
        if any(not t.strip() for t in self.terms):
            raise ValueError("terms must be non-empty")

    def top_term_normalized(self) -> str | None:
        if self.heterogeneous or not self.terms:
            return None
        return " ".join(self.terms[0].lower().split())

    def to_json(self) -> dict:
        return {"terms": list(self.terms), "heterogeneous": self.heterogeneous}

    @classmethod
    def from_json(cls, obj: dict) -> "DescriptionSet":
        ds = cls(terms=tuple(obj.get("terms", ())), heterogeneous=bool(obj.get("heterogeneous")))
        ds.validate()
        return ds


@dataclass(frozen=True)
class RevealItem:
    image_id: str
    patient_id: str
    cluster: int


@dataclass
class ClusterReview:
    stage: Stage = Stage.INITIAL_REVEAL
    initial: tuple[RevealItem, ...] = ()
    validation: tuple[RevealItem, ...] = ()
    submissions: list[DescriptionSet] = field(default_factory=list)  # append-only
    final: DescriptionSet | None = None
    final_decision: str | None = None  # confirm | revise | heterogeneous
    degraded: bool = False


@dataclass
class SessionState:
    session_id: str
    team_id: str
    round_id: str
    seed: int
    clusters: dict[int, ClusterReview]

    def next_cluster(self) -> int | None:
        for c in sorted(self.clusters):
            if self.clusters[c].stage != Stage.FINALIZED:
                return c
        return None

    def is_finished(self) -> bool:
        return self.next_cluster() is None


@dataclass(frozen=True)
class ConsensusRecord:
    cluster: int
    team_a: str
    team_b: str
    description_a: DescriptionSet
    description_b: DescriptionSet
    consensus: str  # agree | disagree | heterogeneous
    pending_adjudication: bool
    curator_note: str = ""


@dataclass
class ClusterCatalog:
    """Read-only cluster membership the review draws from."""

    assignments: dict[str, int]  # image_id -> display cluster index (0-based)
    patient_of: dict[str, str]
    k: int
    conditional_argmax: dict[int, str] = field(default_factory=dict)  # cluster -> top label
    image_dir: Path | None = None
    attribution_dir: Path | None = None

    def eligible(self, cluster: int) -> list[str]:
        return sorted(i for i, c in self.assignments.items() if c == cluster)

    def related_clusters(self, cluster: int) -> list[int]:
        """Clusters sharing this cluster's most likely grading label."""
        label = self.conditional_argmax.get(cluster)
        if label is None:
            return []
        return sorted(
            c for c, lab in self.conditional_argmax.items() if lab == label and c != cluster
        )


class ReviewService:
    """All mutations funnel through _record, which appends one event to the
    session's log file and then applies it; rebuilding replays the log."""

    def __init__(self, catalog: ClusterCatalog, log_dir: Path | None = None):
        self.catalog = catalog
        self.log_dir = Path(log_dir) if log_dir is not None else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, SessionState] = {}
        self.adjudications: dict[str, dict[int, tuple[str, str]]] = {}  # round -> cluster -> (value, note)
        if self.log_dir is not None:
            self._replay_all()

    # ---- event plumbing ----

    def _log_path(self, session_id: str) -> Path:
        return self.log_dir / f"{session_id}.events.jsonl"

    def _round_log_path(self, round_id: str) -> Path:
        return self.log_dir / f"round-{round_id}.events.jsonl"

    def _record(self, path: Path | None, event: dict) -> None:
        self._apply(event)
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n")

    def _replay_all(self) -> None:
        for path in sorted(self.log_dir.glob("*.events.jsonl")):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "session_created":
            state = SessionState(
                session_id=event["session_id"],
                team_id=event["team_id"],
                round_id=event["round_id"],
                seed=event["seed"],
                clusters={c: ClusterReview() for c in event["clusters"]},
            )
            self.sessions[state.session_id] = state
            return
        if kind == "adjudicated":
            self.adjudications.setdefault(event["round_id"], {})[event["cluster"]] = (
                event["consensus"],
                event["note"],
            )
            return
        state = self.sessions[event["session_id"]]
        review = state.clusters[event["cluster"]]
        if kind == "initial_revealed":
            review.initial = tuple(
                RevealItem(i, p, event["cluster"]) for i, p in event["items"]
            )
            review.degraded = event["degraded"]
            review.stage = Stage.DESCRIBING
        elif kind == "descriptions_submitted":
            review.submissions.append(DescriptionSet.from_json(event["descriptions"]))
            review.stage = Stage.VALIDATION_REVEAL
        elif kind == "validation_revealed":
            review.validation = tuple(
                RevealItem(i, p, event["cluster"]) for i, p in event["items"]
            )
            review.stage = Stage.FINALIZE_PENDING
        elif kind == "finalized":
            decision = event["decision"]
            if decision == "revise":
                revision = DescriptionSet.from_json(event["descriptions"])
                review.submissions.append(revision)  # archive: original stays in the list
                review.final = revision
            elif decision == "heterogeneous":
                review.final = DescriptionSet(heterogeneous=True)
            else:
                review.final = review.submissions[-1]
            review.final_decision = decision
            review.stage = Stage.FINALIZED
        else:
            raise ValueError(f"unknown event kind {kind!r}")

    # ---- session operations ----

    def create_session(self, team_id: str, round_id: str, seed: int) -> SessionState:
        for state in self.sessions.values():
            if state.team_id == team_id and state.round_id == round_id and not state.is_finished():
                raise ValueError(
                    f"team {team_id} already has an active session in round {round_id}"
                )
        session_id = f"s-{round_id}-{team_id}-{seed}"
        if session_id in self.sessions:
            raise ValueError(f"session {session_id} already exists")
        event = {
            "event": "session_created",
            "session_id": session_id,
            "team_id": team_id,
            "round_id": round_id,
            "seed": seed,
            "clusters": list(range(self.catalog.k)),
        }
        self._record(self._log_path(session_id) if self.log_dir else None, event)
        return self.sessions[session_id]

    def get_session(self, session_id: str) -> SessionState:
        if session_id not in self.sessions:
            raise KeyError(f"unknown session {session_id}")
        return self.sessions[session_id]

    def _reveal_size(self, n_images: int) -> tuple[int, bool]:
        """(per-stage reveal count, degraded flag) for a cluster of n images."""
        if n_images >= FULL_PROTOCOL_MIN_IMAGES:
            return FULL_REVEAL_SIZE, False
        return min(FULL_REVEAL_SIZE, n_images // 2), True

    def _draw(
        self,
        state: SessionState,
        cluster: int,
        stage_index: int,
        pool: list[str],
        count: int,
        allow_repeat_patients: bool,
    ) -> list[RevealItem]:
        rng = np.random.default_rng(np.random.SeedSequence([state.seed, cluster, stage_index]))
        shuffled = [pool[i] for i in rng.permutation(len(pool))]
        picked: list[str] = []
        used_patients: set[str] = set()
        for image_id in shuffled:
            if len(picked) == count:
                break
            patient = self.catalog.patient_of[image_id]
            if patient in used_patients:
                continue
            used_patients.add(patient)
            picked.append(image_id)
        if len(picked) < count:
            if not allow_repeat_patients:
                raise StageError(
                    f"cluster {cluster}: cannot draw {count} images from distinct patients"
                )
            log.warning(
                "cluster %d: distinct-patient constraint relaxed (%d images available)",
                cluster,
                len(pool),
            )
            remaining = [i for i in shuffled if i not in set(picked)]
            picked.extend(remaining[: count - len(picked)])
        return [RevealItem(i, self.catalog.patient_of[i], cluster) for i in picked]

    def reveal_initial(self, session_id: str, cluster: int) -> tuple[RevealItem, ...]:
        state = self.get_session(session_id)
        review = self._review(state, cluster)
        if review.stage != Stage.INITIAL_REVEAL:
            raise StageError(f"cluster {cluster} is at stage {review.stage.value}")
        pool = self.catalog.eligible(cluster)
        patients = {self.catalog.patient_of[i] for i in pool}
        degraded = len(pool) < FULL_PROTOCOL_MIN_IMAGES or len(patients) < FULL_PROTOCOL_MIN_PATIENTS
        count, _ = self._reveal_size(len(pool))
        if count < 1:
            raise StageError(f"cluster {cluster} has too few images to review ({len(pool)})")
        items = self._draw(state, cluster, 0, pool, count, allow_repeat_patients=degraded)
        event = {
            "event": "initial_revealed",
            "session_id": session_id,
            "cluster": cluster,
            "items": [[it.image_id, it.patient_id] for it in items],
            "degraded": degraded,
        }
        self._record(self._log_path(session_id) if self.log_dir else None, event)
        return state.clusters[cluster].initial

    def submit_descriptions(
        self, session_id: str, cluster: int, descriptions: DescriptionSet
    ) -> None:
        state = self.get_session(session_id)
        review = self._review(state, cluster)
        if review.stage != Stage.DESCRIBING:
            raise StageError(f"cluster {cluster} is at stage {review.stage.value}")
        descriptions.validate()
        event = {
            "event": "descriptions_submitted",
            "session_id": session_id,
            "cluster": cluster,
            "descriptions": descriptions.to_json(),
        }
        self._record(self._log_path(session_id) if self.log_dir else None, event)

    def reveal_validation(self, session_id: str, cluster: int) -> tuple[RevealItem, ...]:
        state = self.get_session(session_id)
        review = self._review(state, cluster)
        if review.stage != Stage.VALIDATION_REVEAL:
            raise StageError(f"cluster {cluster} is at stage {review.stage.value}")
        seen = {it.image_id for it in review.initial}
        pool = [i for i in self.catalog.eligible(cluster) if i not in seen]
        count = min(len(review.initial), len(pool))
        if count < 1:
            raise StageError(f"cluster {cluster} has no unseen images left")
        items = self._draw(state, cluster, 1, pool, count, allow_repeat_patients=True)
        event = {
            "event": "validation_revealed",
            "session_id": session_id,
            "cluster": cluster,
            "items": [[it.image_id, it.patient_id] for it in items],
        }
        self._record(self._log_path(session_id) if self.log_dir else None, event)
        return state.clusters[cluster].validation

    def finalize_cluster(
        self,
        session_id: str,
        cluster: int,
        decision: str,
        revision: DescriptionSet | None = None,
    ) -> DescriptionSet:
        state = self.get_session(session_id)
        review = self._review(state, cluster)
        if review.stage != Stage.FINALIZE_PENDING:
            raise StageError(f"cluster {cluster} is at stage {review.stage.value}")
        if decision not in ("confirm", "revise", "heterogeneous"):
            raise ValueError(f"unknown finalize decision {decision!r}")
        event = {
            "event": "finalized",
            "session_id": session_id,
            "cluster": cluster,
            "decision": decision,
        }
        if decision == "revise":
            if revision is None:
                raise ValueError("revise requires a replacement description set")
            revision.validate()
            event["descriptions"] = revision.to_json()
        self._record(self._log_path(session_id) if self.log_dir else None, event)
        return state.clusters[cluster].final

    def _review(self, state: SessionState, cluster: int) -> ClusterReview:
        if cluster not in state.clusters:
            raise KeyError(f"unknown cluster {cluster}")
        return state.clusters[cluster]

    # ---- consensus ----

    def compute_consensus(self, round_id: str) -> list[ConsensusRecord]:
        teams = [s for s in self.sessions.values() if s.round_id == round_id]
        if len(teams) != 2:
            raise ValueError(
                f"round {round_id} needs exactly 2 team sessions, found {len(teams)}"
            )
        unfinished = [s.team_id for s in teams if not s.is_finished()]
        if unfinished:
            raise ValueError(f"round {round_id}: teams not finalized: {unfinished}")
        a, b = sorted(teams, key=lambda s: s.team_id)
        overrides = self.adjudications.get(round_id, {})
        records = []
        for cluster in sorted(a.clusters):
            da = a.clusters[cluster].final
            db = b.clusters[cluster].final
            if cluster in overrides:
                value, note = overrides[cluster]
                records.append(
                    ConsensusRecord(cluster, a.team_id, b.team_id, da, db, value, False, note)
                )
                continue
            if da.heterogeneous and db.heterogeneous:
                verdict, pending = "heterogeneous", False
            elif (
                da.top_term_normalized() is not None
                and da.top_term_normalized() == db.top_term_normalized()
            ):
                verdict, pending = "agree", False
            else:
                verdict, pending = "disagree", True
            records.append(
                ConsensusRecord(cluster, a.team_id, b.team_id, da, db, verdict, pending)
            )
        return records

    def adjudicate(self, round_id: str, cluster: int, consensus: str, note: str) -> None:
        if consensus not in ("agree", "disagree", "heterogeneous"):
            raise ValueError(f"invalid consensus value {consensus!r}")
        teams = [s for s in self.sessions.values() if s.round_id == round_id]
        if not any(cluster in s.clusters for s in teams):
            raise KeyError(f"unknown cluster {cluster} in round {round_id}")
        event = {
            "event": "adjudicated",
            "round_id": round_id,
            "cluster": cluster,
            "consensus": consensus,
            "note": note,
        }
        self._record(self._round_log_path(round_id) if self.log_dir else None, event)
