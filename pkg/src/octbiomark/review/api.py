"""HTTP API over the review service.

Thin JSON layer: every route delegates to ReviewService and maps its errors
(StageError -> 409, ValueError -> 422, KeyError -> 404). Media routes serve
the image, attribution-map and overlay PNGs referenced by reveals. The
adjudication route requires the curator role header (x-role: curator).
"""

from pathlib import Path

from fastapi import FastAPI, Header, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from .core import DescriptionSet, ReviewService, RevealItem, SessionState, StageError


class CreateSessionBody(BaseModel):
    team_id: str = Field(min_length=1)
    round_id: str = Field(min_length=1)
    seed: int


class DescriptionBody(BaseModel):
    terms: list[str] = []
    heterogeneous: bool = False


class FinalizeBody(BaseModel):
    decision: str
    terms: list[str] = []
    heterogeneous: bool = False


class AdjudicateBody(BaseModel):
    consensus: str
    note: str = ""


def _item_payload(item: RevealItem) -> dict:
    return {
        "image_id": item.image_id,
        "patient_id": item.patient_id,
        "cluster": item.cluster,
        "image_url": f"/media/images/{item.image_id}.png",
        "attribution_url": f"/media/attributions/{item.image_id}.png",
        "overlay_url": f"/media/overlays/{item.image_id}.png",
    }


def _session_payload(state: SessionState) -> dict:
    clusters = {}
    for c, review in sorted(state.clusters.items()):
        clusters[str(c)] = {
            "stage": review.stage.value,
            "degraded": review.degraded,
            "initial": [_item_payload(i) for i in review.initial],
            "validation": [_item_payload(i) for i in review.validation],
            "submissions": [s.to_json() for s in review.submissions],
            "final": review.final.to_json() if review.final else None,
            "final_decision": review.final_decision,
        }
    return {
        "session_id": state.session_id,
        "team_id": state.team_id,
        "round_id": state.round_id,
        "seed": state.seed,
        "next_cluster": state.next_cluster(),
        "clusters": clusters,
    }


def create_app(service: ReviewService) -> FastAPI:
    app = FastAPI(title="cluster review service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def run(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc.args[0])) from exc
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        state = run(service.create_session, body.team_id, body.round_id, body.seed)
        return _session_payload(state)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_payload(run(service.get_session, session_id))

    @app.get("/sessions/{session_id}/next")
    def next_cluster(session_id: str):
        state = run(service.get_session, session_id)
        return {"cluster": state.next_cluster()}

    @app.post("/sessions/{session_id}/clusters/{cluster}/reveal-initial")
    def reveal_initial(session_id: str, cluster: int):
        items = run(service.reveal_initial, session_id, cluster)
        state = service.get_session(session_id)
        return {
            "items": [_item_payload(i) for i in items],
            "degraded": state.clusters[cluster].degraded,
            "stage": state.clusters[cluster].stage.value,
        }

    @app.post("/sessions/{session_id}/clusters/{cluster}/descriptions")
    def submit_descriptions(session_id: str, cluster: int, body: DescriptionBody):
        ds = DescriptionSet(terms=tuple(body.terms), heterogeneous=body.heterogeneous)
        run(service.submit_descriptions, session_id, cluster, ds)
        state = service.get_session(session_id)
        return {"stage": state.clusters[cluster].stage.value}

    @app.post("/sessions/{session_id}/clusters/{cluster}/reveal-validation")
    def reveal_validation(session_id: str, cluster: int):
        items = run(service.reveal_validation, session_id, cluster)
        state = service.get_session(session_id)
        return {
            "items": [_item_payload(i) for i in items],
            "stage": state.clusters[cluster].stage.value,
        }

    @app.post("/sessions/{session_id}/clusters/{cluster}/finalize")
    def finalize(session_id: str, cluster: int, body: FinalizeBody):
        revision = None
        if body.decision == "revise":
            revision = DescriptionSet(terms=tuple(body.terms), heterogeneous=body.heterogeneous)
        final = run(service.finalize_cluster, session_id, cluster, body.decision, revision)
        state = service.get_session(session_id)
        return {
            "final": final.to_json(),
            "stage": state.clusters[cluster].stage.value,
        }

    @app.get("/rounds/{round_id}/consensus")
    def consensus(round_id: str):
        records = run(service.compute_consensus, round_id)
        return {
            "round_id": round_id,
            "records": [
                {
                    "cluster": r.cluster,
                    "team_a": r.team_a,
                    "team_b": r.team_b,
                    "description_a": r.description_a.to_json(),
                    "description_b": r.description_b.to_json(),
                    "consensus": r.consensus,
                    "pending_adjudication": r.pending_adjudication,
                    "curator_note": r.curator_note,
                }
                for r in records
            ],
        }

    @app.post("/rounds/{round_id}/clusters/{cluster}/adjudicate")
    def adjudicate(
        round_id: str,
        cluster: int,
        body: AdjudicateBody,
        x_role: str | None = Header(default=None),
    ):
        if x_role != "curator":
            raise HTTPException(status_code=403, detail="adjudication requires the curator role")
        run(service.adjudicate, round_id, cluster, body.consensus, body.note)
        return {"cluster": cluster, "consensus": body.consensus}

    @app.get("/clusters/{cluster}/related")
    def related(cluster: int):
        if not 0 <= cluster < service.catalog.k:
            raise HTTPException(status_code=404, detail=f"unknown cluster {cluster}")
        return {"cluster": cluster, "related": service.catalog.related_clusters(cluster)}

    def _serve_png(root: Path | None, name: str, suffix: str) -> FileResponse:
        if root is None:
            raise HTTPException(status_code=404, detail="media directory not configured")
        if "/" in name or "\\" in name or ".." in name:
            raise HTTPException(status_code=404, detail="bad media id")
        path = Path(root) / f"{name}{suffix}"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no media for {name}")
        return FileResponse(path, media_type="image/png")

    @app.get("/media/images/{image_id}.png")
    def media_image(image_id: str):
        return _serve_png(service.catalog.image_dir, image_id, ".png")

    @app.get("/media/attributions/{image_id}.png")
    def media_attribution(image_id: str):
        return _serve_png(service.catalog.attribution_dir, image_id, ".attr.png")

    @app.get("/media/overlays/{image_id}.png")
    def media_overlay(image_id: str):
        return _serve_png(service.catalog.attribution_dir, image_id, ".overlay.png")

    return app
