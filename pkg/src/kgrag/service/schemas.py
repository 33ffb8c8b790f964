from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

from ..actions import Observation


class RetrieveRequest(BaseModel):
    sample_id: str = Field(min_length=1)
    action_name: str
    args: list[str] = Field(default_factory=list, max_length=2)
    format_mode: Optional[Literal["flat", "hierarchical"]] = None


class RetrieveResponse(BaseModel):
    status: Literal["ok", "error"]
    rendered_text: str
    result_labels: Optional[list[str]] = None
    error_code: Optional[str] = None
    error_kind: Optional[str] = None
    truncated: int = 0
    timing_ms: float = 0.0

    @classmethod
    def from_observation(cls, obs: Observation, timing_ms: float = 0.0) -> "RetrieveResponse":
        if obs.ok:
            return cls(status="ok", rendered_text=obs.text, result_labels=list(obs.labels),
                       truncated=obs.truncated, timing_ms=timing_ms)
        return cls(status="error", rendered_text=obs.text, error_code=obs.error_code,
                   error_kind=obs.error_kind, timing_ms=timing_ms)

    def to_observation(self) -> Observation:
        if self.status == "ok":
            return Observation("ok", self.rendered_text, tuple(self.result_labels or ()), truncated=self.truncated)
        return Observation("error", self.rendered_text, error_code=self.error_code, error_kind=self.error_kind)


class GraphStats(BaseModel):
    entities: int
    relations: int
    triples: int


class HealthResponse(BaseModel):
    status: str = "ok"
    samples: int
    graph: GraphStats
    shared_graph: Optional[GraphStats] = None
    uptime_s: float
    generation: int
    catalogue_version: str


class SampleInfo(BaseModel):
    """Public view of a sample; gold answers are deliberately absent."""

    sample_id: str
    question: str
    anchor_entities: list[str]
    graph: GraphStats


class SwapRequest(BaseModel):
    path: Optional[str] = None
    rows: Optional[list[dict]] = None


class SwapResponse(BaseModel):
    status: str
    samples: int
    generation: int
    rejected: list[dict] = Field(default_factory=list)
