"""HTTP front end for the retrieval actions, scoped per QA sample."""

from __future__ import annotations

import asyncio
import io
import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from ..actions import (
    CATALOGUE, DEFAULT_MAX_RESULTS, ErrorKind, KGError, Observation, RetrievalAction, execute,
)
from ..graph import KnowledgeGraph, QADatasetError, QASample, RejectedRow, load_qa_dataset
from .schemas import (
    GraphStats, HealthResponse, RetrieveRequest, RetrieveResponse, SampleInfo, SwapRequest, SwapResponse,
)

logger = logging.getLogger(__name__)

SHARED_SAMPLE_ID = "*"


@dataclass(frozen=True)
class ServiceConfig:
    format_mode: str = "flat"
    max_results: int = DEFAULT_MAX_RESULTS
    timeout_s: float = 5.0


@dataclass(frozen=True)
class Backend:
    samples: dict[str, QASample]
    shared: KnowledgeGraph | None
    generation: int


class DatasetStore:
    """Holds the current backend; a swap replaces it in one reference assignment."""

    def __init__(self, samples: Sequence[QASample] = (), shared: KnowledgeGraph | None = None):
        self._lock = threading.Lock()
        self._backend = Backend(self._index(samples), shared, 0)

    @staticmethod
    def _index(samples: Iterable[QASample]) -> dict[str, QASample]:
        out: dict[str, QASample] = {}
        for s in samples:
            if s.sample_id in out:
                raise QADatasetError(f"duplicate sample_id {s.sample_id!r}")
            out[s.sample_id] = s
        return out

    @property
    def backend(self) -> Backend:
        return self._backend

    def swap(self, samples: Sequence[QASample], shared: KnowledgeGraph | None = None) -> Backend:
        index = self._index(samples)  # validate before touching the live backend
        with self._lock:
            self._backend = Backend(index, shared, self._backend.generation + 1)
            return self._backend

    def graph_for(self, backend: Backend, sample_id: str) -> KnowledgeGraph:
        if sample_id == SHARED_SAMPLE_ID and backend.shared is not None:
            return backend.shared
        sample = backend.samples.get(sample_id)
        if sample is None:
            raise KGError(ErrorKind.SAMPLE_MISSING, sample_id=sample_id)
        return sample.graph


def _stats(graph: KnowledgeGraph) -> GraphStats:
    return GraphStats(**graph.stats())


def format_validation_error(errors: Sequence[dict], what: str = "request") -> RetrieveResponse:
    missing = [str(e["loc"][-1]) for e in errors if e.get("type") == "missing"]
    if missing:
        text = f"Missing required fields for {what}: {', '.join(missing)}"
        kind = ErrorKind.MISSING_FIELDS.value
    else:
        first = errors[0] if errors else {"loc": (), "msg": "malformed body"}
        loc = ".".join(str(p) for p in first.get("loc", ()) if p != "body")
        text = f"Invalid {what} field {loc}: {first.get('msg')}" if loc else f"Invalid {what}: {first.get('msg')}"
        kind = "Invalid Request"
    return RetrieveResponse(status="error", rendered_text=text, error_code="KG_FORMAT_ERROR", error_kind=kind)


def create_app(
    samples: Sequence[QASample] = (),
    config: ServiceConfig = ServiceConfig(),
    shared_graph: KnowledgeGraph | None = None,
    store: DatasetStore | None = None,
) -> FastAPI:
    store = store or DatasetStore(samples, shared_graph)
    started = time.monotonic()
    app = FastAPI(title="kgrag retrieval service")
    app.state.store = store
    app.state.config = config

    def run_one(req: RetrieveRequest) -> Observation:
        backend = store.backend  # one snapshot per request
        try:
            graph = store.graph_for(backend, req.sample_id)
        except KGError as err:
            return Observation.from_error(err)
        action = RetrievalAction(req.action_name, tuple(req.args))
        return execute(graph, action, req.format_mode or config.format_mode, config.max_results)

    async def handle(req: RetrieveRequest) -> RetrieveResponse:
        t0 = time.perf_counter()
        try:
            obs = await asyncio.wait_for(asyncio.to_thread(run_one, req), timeout=config.timeout_s)
        except asyncio.TimeoutError:
            obs = Observation.from_error(KGError(ErrorKind.TIMEOUT, seconds=config.timeout_s))
        return RetrieveResponse.from_observation(obs, timing_ms=(time.perf_counter() - t0) * 1000)

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        body = format_validation_error(exc.errors())
        return JSONResponse(status_code=422, content=body.model_dump())

    @app.post("/retrieve", response_model=RetrieveResponse)
    async def retrieve(req: RetrieveRequest) -> RetrieveResponse:
        return await handle(req)

    @app.post("/retrieve/batch", response_model=list[RetrieveResponse])
    async def retrieve_batch(items: list[Any]) -> list[RetrieveResponse]:
        async def one(item: Any) -> RetrieveResponse:
            try:
                req = RetrieveRequest.model_validate(item)
            except ValidationError as exc:
                return format_validation_error(exc.errors(), "batch item")
            return await handle(req)

        return list(await asyncio.gather(*(one(i) for i in items)))

    @app.get("/health", response_model=HealthResponse)
    async def health() -> HealthResponse:
        backend = store.backend
        totals = {"entities": 0, "relations": 0, "triples": 0}
        seen: set[int] = set()
        for s in backend.samples.values():
            if id(s.graph) in seen:
                continue
            seen.add(id(s.graph))
            for k, v in s.graph.stats().items():
                totals[k] += v
        return HealthResponse(
            samples=len(backend.samples),
            graph=GraphStats(**totals),
            shared_graph=_stats(backend.shared) if backend.shared is not None else None,
            uptime_s=time.monotonic() - started,
            generation=backend.generation,
            catalogue_version=CATALOGUE["version"],
        )

    @app.get("/samples/{sample_id}", response_model=SampleInfo)
    async def sample_info(sample_id: str):
        sample = store.backend.samples.get(sample_id)
        if sample is None:
            err = KGError(ErrorKind.SAMPLE_MISSING, sample_id=sample_id)
            return JSONResponse(
                status_code=404,
                content=RetrieveResponse.from_observation(Observation.from_error(err)).model_dump(),
            )
        return SampleInfo(
            sample_id=sample.sample_id,
            question=sample.question,
            anchor_entities=list(sample.anchor_entities),
            graph=_stats(sample.graph),
        )

    @app.post("/admin/swap", response_model=SwapResponse)
    async def swap(req: SwapRequest):
        if (req.path is None) == (req.rows is None):
            return JSONResponse(status_code=400, content={"detail": "give exactly one of path or rows"})
        rejected: list[RejectedRow] = []
        try:
            if req.path is not None:
                new = load_qa_dataset(req.path, rejected=rejected)
            else:
                blob = "\n".join(json.dumps(r) for r in req.rows).encode("utf-8")
                new = load_qa_dataset(io.BytesIO(blob), rejected=rejected)
        except OSError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        if rejected:
            return JSONResponse(
                status_code=400,
                content=SwapResponse(
                    status="rejected", samples=0, generation=store.backend.generation,
                    rejected=[r.__dict__ for r in rejected],
                ).model_dump(),
            )
        try:
            backend = store.swap(new, store.backend.shared)
        except QADatasetError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        logger.info("backend swapped: generation %d, %d samples", backend.generation, len(new))
        return SwapResponse(status="ok", samples=len(new), generation=backend.generation)

    return app


def swap_backend(app: FastAPI, samples: Sequence[QASample], shared_graph: KnowledgeGraph | None = None) -> int:
    """In-process swap; returns the new backend generation."""
    return app.state.store.swap(samples, shared_graph).generation
