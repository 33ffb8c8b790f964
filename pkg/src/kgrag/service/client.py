"""Thin HTTP client for the retrieval service."""

from __future__ import annotations

from typing import Sequence

import httpx

from ..actions import Observation, RetrievalAction, execute
from ..graph import KnowledgeGraph
from ..rollout import InfrastructureError
from .schemas import RetrieveResponse

_EMPTY = KnowledgeGraph()


class ServiceClient:
    def __init__(self, base_url: str = "http://127.0.0.1:8000", *, http: httpx.Client | None = None,
                 timeout: float = 30.0):
        self.http = http or httpx.Client(base_url=base_url, timeout=timeout)

    def _call(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            return self.http.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise InfrastructureError(f"retrieval service unreachable: {exc}") from exc

    def retrieve(self, sample_id: str, action: RetrievalAction, format_mode: str | None = None) -> RetrieveResponse:
        payload = {"sample_id": sample_id, "action_name": action.name, "args": list(action.args)}
        if format_mode:
            payload["format_mode"] = format_mode
        resp = self._call("POST", "/retrieve", json=payload)
        if resp.status_code >= 500:
            raise InfrastructureError(f"retrieval service error {resp.status_code}")
        return RetrieveResponse.model_validate(resp.json())

    def retrieve_batch(self, items: Sequence[dict]) -> list[RetrieveResponse]:
        resp = self._call("POST", "/retrieve/batch", json=list(items))
        resp.raise_for_status()
        return [RetrieveResponse.model_validate(r) for r in resp.json()]

    def health(self) -> dict:
        return self._call("GET", "/health").json()

    def sample(self, sample_id: str) -> dict:
        return self._call("GET", f"/samples/{sample_id}").json()

    def swap(self, *, path: str | None = None, rows: list[dict] | None = None) -> dict:
        resp = self._call("POST", "/admin/swap", json={"path": path, "rows": rows})
        return resp.json()

    def executor(self, sample_id: str, format_mode: str | None = None) -> "ServiceExecutor":
        return ServiceExecutor(self, sample_id, format_mode)


class ServiceExecutor:
    """Callable executor that routes actions for one sample through the service."""

    def __init__(self, client: ServiceClient, sample_id: str, format_mode: str | None = None):
        self.client = client
        self.sample_id = sample_id
        self.format_mode = format_mode

    def __call__(self, action: RetrievalAction) -> Observation:
        if len(action.args) > 2:
            # the wire caps args at two; arity errors need no graph, so render them locally
            return execute(_EMPTY, action)
        return self.client.retrieve(self.sample_id, action, self.format_mode).to_observation()
