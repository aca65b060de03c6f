"""Cluster review sessions: staged reveals, descriptions, consensus."""

from .core import (
    ClusterCatalog,
    ConsensusRecord,
    DescriptionSet,
    RevealItem,
    ReviewService,
    SessionState,
    Stage,
    StageError,
)

__all__ = [
    "ClusterCatalog",
    "ConsensusRecord",
    "DescriptionSet",
    "RevealItem",
    "ReviewService",
    "SessionState",
    "Stage",
    "StageError",
]
