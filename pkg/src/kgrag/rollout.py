"""Policies and the episode driver / N-rollout collector."""

from __future__ import annotations

import logging
import random
import re
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Iterable, Protocol, Sequence, runtime_checkable

import httpx

from .actions import DEFAULT_MAX_RESULTS, RetrievalAction, execute, realize_path
from .graph import KnowledgeGraph, QASample, ReasoningPath
from .protocol import AnswerSet, Executor, TrajectoryState, advance, start
from .rewards import RewardBreakdown, RewardConfig, score_trajectory

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_CAP = 32_768


class InfrastructureError(RuntimeError):
    """A policy or retrieval backend could not be reached."""


class AllRolloutsFailed(InfrastructureError):
    pass


@runtime_checkable
class Policy(Protocol):
    def generate(self, context: str) -> str: ...


def _fork(policy, index: int):
    fork = getattr(policy, "fork", None)
    return fork(index) if callable(fork) else policy


def _next_scripted(script: Sequence[str], context: str) -> str:
    # Position in the script = how many of our own messages already sit in the context, in order.
    pos = 0
    for msg in script:
        found = context.find(msg, pos)
        if found < 0:
            return msg
        pos = found + len(msg)
    return script[-1]


def _quote(label: str) -> str:
    return '"' + label.replace("\\", "\\\\").replace('"', '\\"') + '"'


class ScriptedPolicy:
    """Replays fixed message lists; rollout ``i`` uses ``scripts[i % len(scripts)]``."""

    def __init__(self, scripts: Sequence[Sequence[str]] | Sequence[str], index: int = 0):
        if scripts and isinstance(scripts[0], str):
            scripts = [scripts]
        self.scripts = [list(s) for s in scripts]
        self.script = self.scripts[index % len(self.scripts)]

    def fork(self, index: int) -> "ScriptedPolicy":
        return ScriptedPolicy(self.scripts, index)

    def generate(self, context: str) -> str:
        return _next_scripted(self.script, context)


class OraclePolicy(ScriptedPolicy):
    """Walks a known reasoning path with forward hops, then answers its last node.

    Paths longer than ``max_turns - 1`` hops are cut short and ``truncated`` is set.
    """

    def __init__(self, graph: KnowledgeGraph, path: ReasoningPath, max_turns: int):
        actions = realize_path(graph, path)
        budget = max(0, max_turns - 1)
        self.truncated = len(actions) > budget
        actions = actions[:budget]
        msgs = []
        for i, act in enumerate(actions, start=1):
            entity, relation = act.args
            msgs.append(
                f"<think>Step {i}: follow {_quote(relation)} from {_quote(entity)}.</think>\n"
                f"<kg-query>{act.render()}</kg-query>"
            )
        answer = path.nodes[len(actions)]
        msgs.append(f"<think>Reached the end of the path.</think>\n<answer>{_quote(answer)}</answer>")
        super().__init__([msgs])


def find_path(graph: KnowledgeGraph, sources: Iterable[str], targets: Iterable[str], max_hops: int) -> ReasoningPath | None:
    """Shortest directed path from any source to any target, or None."""
    targets = set(targets)
    parent: dict[str, tuple[str, str] | None] = {}
    queue = deque()
    for s in sorted(set(sources)):
        if s in graph.entities:
            parent[s] = None
            queue.append((s, 0))
    while queue:
        node, depth = queue.popleft()
        if node in targets:
            nodes, edges = [node], []
            while parent[node] is not None:
                prev, rel = parent[node]
                nodes.append(prev)
                edges.append(rel)
                node = prev
            return ReasoningPath(tuple(reversed(nodes)), tuple(reversed(edges)))
        if depth == max_hops:
            continue
        for rel, nxt in sorted(graph.head_index.get(node, ())):
            if nxt not in parent:
                parent[nxt] = (node, rel)
                queue.append((nxt, depth + 1))
    return None


def oracle_policy(sample: QASample, max_turns: int) -> OraclePolicy:
    path = sample.gold_path or find_path(sample.graph, sample.anchor_entities, sample.gold_answers, max_hops=8)
    if path is None:
        raise ValueError(f"sample {sample.sample_id!r} has no gold path")
    return OraclePolicy(sample.graph, path, max_turns)


class RandomPolicy:
    """Stochastic test double: random well-formed queries over labels seen so far, then an answer."""

    def __init__(self, seed: int = 0, answer_prob: float = 0.3, index: int = 0):
        self.seed = seed
        self.answer_prob = answer_prob
        self._rng = random.Random(seed * 1_000_003 + index)

    def fork(self, index: int) -> "RandomPolicy":
        return RandomPolicy(self.seed, self.answer_prob, index)

    def generate(self, context: str) -> str:
        question, _, dialogue = context.rpartition("Question:")[2].partition("Assistant:")
        labels = re.findall(r"[\w.]+", question)
        for body in re.findall(r"<information>[^:<]*: ([^<]*)</information>", dialogue):
            labels += [x.strip() for x in re.split(r"[,\n]", body) if x.strip()]
        rng = self._rng
        if not labels or rng.random() < self.answer_prob:
            pick = rng.choice(labels) if labels else "unknown"
            return f"<think>Guessing.</think>\n<answer>{pick.strip()}</answer>"
        name = rng.choice(["get_tail_relations", "get_head_relations", "get_tail_entities", "get_head_entities"])
        args = [rng.choice(labels).strip()]
        if name.endswith("entities"):
            args.append(rng.choice(labels).strip())
        return f"<think>Exploring.</think>\n<kg-query>{RetrievalAction(name, tuple(args)).render()}</kg-query>"


@dataclass
class RemotePolicy:
    """Text-completion endpoint bound as a policy.

    Wire format: ``POST {endpoint}/completions`` with ``{model, context, temperature,
    top_p, top_k, max_tokens}`` returning ``{text, logprobs?}``; ``POST
    {endpoint}/logprobs`` with ``{model, context, continuation}`` returning ``{logprobs}``.
    """

    endpoint: str
    model: str = "default"
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = -1
    max_tokens: int = 1024
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 0.5
    transport: httpx.BaseTransport | None = field(default=None, repr=False)
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    @classmethod
    def for_evaluation(cls, endpoint: str, **kwargs) -> "RemotePolicy":
        kwargs.setdefault("temperature", 0.0)
        return cls(endpoint, **kwargs)

    def _post(self, path: str, payload: dict) -> dict:
        url = self.endpoint.rstrip("/") + path
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                    resp = client.post(url, json=payload)
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError("server error", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500:
                    break
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * 2**attempt)
        raise InfrastructureError(f"policy endpoint {url} failed after {self.attempts} attempts: {last}")

    def generate(self, context: str) -> str:
        data = self._post("/completions", {
            "model": self.model,
            "context": context,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "max_tokens": self.max_tokens,
        })
        return data["text"]

    def token_logprobs(self, context: str, message: str) -> list[float]:
        data = self._post("/logprobs", {"model": self.model, "context": context, "continuation": message})
        return list(data["logprobs"])


def local_executor(graph: KnowledgeGraph, format_mode: str = "flat", max_results: int = DEFAULT_MAX_RESULTS) -> Executor:
    return partial(execute, graph, format_mode=format_mode, max_results=max_results)


def run_episode(
    sample: QASample,
    policy: Policy,
    max_turns: int,
    *,
    executor: Executor | None = None,
    format_mode: str = "flat",
    max_results: int = DEFAULT_MAX_RESULTS,
    context_cap: int = DEFAULT_CONTEXT_CAP,
    rollout_index: int = 0,
) -> TrajectoryState:
    """Drive one episode to termination.

    Transport failures mark the trajectory ``infra_failed``; a context longer
    than ``context_cap`` characters ends it with an empty prediction.
    """
    if executor is None:
        executor = local_executor(sample.graph, format_mode, max_results)
    state = start(
        sample.sample_id, sample.question, max_turns,
        rollout_index=rollout_index, gold_answers=sample.gold_answers,
    )
    while not state.terminated:
        context = state.context
        if len(context) > context_cap:
            return replace(state, terminated=True, context_overflow=True, predicted_answers=AnswerSet())
        try:
            message = policy.generate(context)
            state = advance(state, message, executor, sample.graph)
        except InfrastructureError as exc:
            logger.warning("rollout %d of %s failed: %s", rollout_index, sample.sample_id, exc)
            return replace(state, terminated=True, infra_failed=True)
    return state


@dataclass
class RolloutGroup:
    sample_id: str
    rollouts: list[TrajectoryState]
    breakdowns: list[RewardBreakdown | None] | None = None

    @property
    def succeeded(self) -> list[TrajectoryState]:
        return [r for r in self.rollouts if not r.infra_failed]

    def score(self, gold: Sequence[str], cfg: RewardConfig = RewardConfig()) -> list[RewardBreakdown | None]:
        self.breakdowns = [
            None if r.infra_failed else score_trajectory(r, gold, cfg) for r in self.rollouts
        ]
        return self.breakdowns


def collect_rollouts(
    sample: QASample,
    policy: Policy,
    n: int,
    max_turns: int,
    *,
    executor_factory: Callable[[QASample], Executor] | None = None,
    concurrency: int = 8,
    format_mode: str = "flat",
    max_results: int = DEFAULT_MAX_RESULTS,
    context_cap: int = DEFAULT_CONTEXT_CAP,
) -> RolloutGroup:
    """Run ``n`` independent episodes of ``sample``; results keep rollout order."""
    if n < 1 or max_turns < 1:
        raise ValueError("n and max_turns must be >= 1")
    executor = executor_factory(sample) if executor_factory else local_executor(sample.graph, format_mode, max_results)

    def one(i: int) -> TrajectoryState:
        return run_episode(
            sample, _fork(policy, i), max_turns,
            executor=executor, context_cap=context_cap, rollout_index=i,
        )

    workers = max(1, min(concurrency, n))
    if workers == 1:
        rollouts = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rollouts = list(pool.map(one, range(n)))
    group = RolloutGroup(sample.sample_id, rollouts)
    if not group.succeeded:
        raise AllRolloutsFailed(f"all {n} rollouts failed for sample {sample.sample_id!r}")
    return group
