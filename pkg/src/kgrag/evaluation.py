"""Batch evaluation: N-run answer union, metric aggregation, generation accounting."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .actions import DEFAULT_MAX_RESULTS
from .graph import QASample
from .protocol import AnswerSet, Executor, TrajectoryState
from .rewards import RewardConfig, f1, hit_at_1, retrieval_coverage
from .rollout import AllRolloutsFailed, Policy, collect_rollouts


def union_of_runs(answer_sets: Sequence[AnswerSet]) -> AnswerSet:
    if not answer_sets:
        raise ValueError("need at least one answer set")
    ents: list[str] = []
    resolved: dict[str, bool] = {}
    for a in answer_sets:
        flags = a.resolved or (False,) * len(a.entities)
        for ent, flag in zip(a.entities, flags):
            if ent not in resolved:
                ents.append(ent)
                resolved[ent] = flag
            else:
                resolved[ent] = resolved[ent] or flag
    raw = "\n".join(a.raw_text for a in answer_sets)
    return AnswerSet(raw, tuple(ents), tuple(resolved[e] for e in ents))


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class SampleResult:
    sample_id: str
    runs: int
    f1: float
    hit_at_1: float
    hit_at_1_strict: float
    retrieval: float
    union_f1: float
    union_hit_at_1: int
    union_retrieval: int
    gen_chars: float
    gen_tokens: float
    total_tokens: float
    turns: float
    infra_failed: int
    budget_exhausted: int
    error_codes: dict[str, int] = field(default_factory=dict)


def score_sample(sample: QASample, rollouts: Sequence[TrajectoryState], token_counter: Callable[[str], int] = whitespace_tokens) -> SampleResult:
    ok = [r for r in rollouts if not r.infra_failed]
    gold = sample.gold_answers
    preds = [r.predicted_answers or AnswerSet() for r in ok]
    n = len(ok)
    codes: Counter[str] = Counter()
    gen_chars = gen_tokens = total = 0
    for r in ok:
        for rec in r.records:
            gen_chars += len(rec.message)
            gen_tokens += token_counter(rec.message)
            if rec.observation is not None and not rec.observation.ok:
                codes[rec.observation.error_code] += 1
        total += token_counter(r.context)
    union = union_of_runs(preds)
    cover = [retrieval_coverage(r, gold) for r in ok]
    return SampleResult(
        sample_id=sample.sample_id,
        runs=n,
        f1=sum(f1(p, gold) for p in preds) / n,
        hit_at_1=sum(hit_at_1(p, gold) for p in preds) / n,
        hit_at_1_strict=sum(hit_at_1(p, gold, strict=True) for p in preds) / n,
        retrieval=sum(cover) / n,
        union_f1=f1(union, gold),
        union_hit_at_1=hit_at_1(union, gold),
        union_retrieval=int(any(cover)),
        gen_chars=gen_chars / n,
        gen_tokens=gen_tokens / n,
        total_tokens=total / n,
        turns=sum(len(r.records) for r in ok) / n,
        infra_failed=len(rollouts) - n,
        budget_exhausted=sum(r.budget_exhausted for r in ok),
        error_codes=dict(codes),
    )


_METRICS = ("f1", "hit_at_1", "hit_at_1_strict", "retrieval", "union_f1", "union_hit_at_1",
            "union_retrieval", "gen_chars", "gen_tokens", "total_tokens", "turns")


@dataclass
class MetricsReport:
    dataset: str
    n: int
    max_turns: int
    samples: int
    excluded: int
    f1: float
    hit_at_1: float
    hit_at_1_strict: float
    retrieval_rate: float
    union_f1: float
    union_hit_at_1: float
    union_retrieval_rate: float
    gen_chars: float
    gen_tokens: float
    total_tokens: float
    mean_turns: float
    infra_failed_rollouts: int
    budget_exhausted_rollouts: int
    error_counts: dict[str, int]
    averaging: str
    config: dict
    fingerprint: str
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def render_table(self) -> str:
        header = f"{'Dataset':<16}{'F1':>8}{'Hit@1':>8}{'Total':>10}{'Gen':>10}"
        row = (
            f"{self.dataset:<16}{100 * self.f1:>8.1f}{100 * self.hit_at_1:>8.1f}"
            f"{self.total_tokens:>10.1f}{self.gen_tokens:>10.1f}"
        )
        lines = [
            header,
            row,
            "",
            f"N={self.n} H={self.max_turns} samples={self.samples} excluded={self.excluded}",
            f"union over N runs: F1={100 * self.union_f1:.1f} Hit@1={100 * self.union_hit_at_1:.1f}",
            f"retrieval rate={100 * self.retrieval_rate:.1f}",
        ]
        if self.error_counts:
            lines.append("errors: " + ", ".join(f"{k}={v}" for k, v in sorted(self.error_counts.items())))
        return "\n".join(lines) + "\n"


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def aggregate(results: Sequence[SampleResult], *, dataset: str, n: int, max_turns: int, excluded: int,
              config: dict, macro: bool = False) -> MetricsReport:
    if not results:
        raise ValueError("no samples could be evaluated")
    results = sorted(results, key=lambda r: r.sample_id)

    def avg(name: str) -> float:
        if macro:
            return sum(getattr(r, name) for r in results) / len(results)
        # micro: every successful episode weighs the same
        runs = sum(r.runs for r in results)
        return sum(getattr(r, name) * r.runs for r in results) / runs

    codes: Counter[str] = Counter()
    for r in results:
        codes.update(r.error_codes)
    union = {m: sum(getattr(r, m) for r in results) / len(results)
             for m in ("union_f1", "union_hit_at_1", "union_retrieval")}
    return MetricsReport(
        dataset=dataset,
        n=n,
        max_turns=max_turns,
        samples=len(results),
        excluded=excluded,
        f1=avg("f1"),
        hit_at_1=avg("hit_at_1"),
        hit_at_1_strict=avg("hit_at_1_strict"),
        retrieval_rate=avg("retrieval"),
        union_f1=union["union_f1"],
        union_hit_at_1=union["union_hit_at_1"],
        union_retrieval_rate=union["union_retrieval"],
        gen_chars=avg("gen_chars"),
        gen_tokens=avg("gen_tokens"),
        total_tokens=avg("total_tokens"),
        mean_turns=avg("turns"),
        infra_failed_rollouts=sum(r.infra_failed for r in results),
        budget_exhausted_rollouts=sum(r.budget_exhausted for r in results),
        error_counts=dict(sorted(codes.items())),
        averaging="macro" if macro else "micro",
        config=config,
        fingerprint=fingerprint(config),
        per_sample=[{k: v for k, v in asdict(r).items()} for r in results],
    )


PolicySource = Policy | Callable[[QASample], Policy]


def evaluate(
    dataset: Sequence[QASample],
    policy: PolicySource,
    n: int = 1,
    max_turns: int = 5,
    *,
    reward_config: RewardConfig = RewardConfig(),
    executor_factory: Callable[[QASample], Executor] | None = None,
    concurrency: int = 4,
    format_mode: str = "flat",
    max_results: int = DEFAULT_MAX_RESULTS,
    macro: bool = False,
    dataset_name: str = "dataset",
    token_counter: Callable[[str], int] = whitespace_tokens,
    extra_config: dict | None = None,
    on_group=None,
) -> MetricsReport:
    """Collect ``n`` rollouts per sample and aggregate per-run and union metrics.

    ``policy`` is either a policy or a factory called once per sample (the
    oracle needs the sample's gold path). Samples whose rollouts all fail are
    excluded and counted.
    """
    if not dataset:
        raise ValueError("dataset is empty")

    def policy_for(sample: QASample) -> Policy:
        return policy if hasattr(policy, "generate") else policy(sample)

    def run(sample: QASample):
        try:
            group = collect_rollouts(
                sample, policy_for(sample), n, max_turns,
                executor_factory=executor_factory, concurrency=1,
                format_mode=format_mode, max_results=max_results,
            )
        except AllRolloutsFailed:
            return None
        if on_group is not None:
            group.score(sample.gold_answers, reward_config)
            on_group(sample, group)
        return score_sample(sample, group.rollouts, token_counter)

    workers = max(1, min(concurrency, len(dataset)))
    if workers == 1:
        outcomes = [run(s) for s in dataset]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, dataset))
    results = [r for r in outcomes if r is not None]
    config = {
        "n": n,
        "max_turns": max_turns,
        "format_mode": format_mode,
        "max_results": max_results,
        "reward": reward_config.to_dict(),
        "samples": sorted(s.sample_id for s in dataset),
        **(extra_config or {}),
    }
    return aggregate(
        results, dataset=dataset_name, n=n, max_turns=max_turns,
        excluded=len(outcomes) - len(results), config=config, macro=macro,
    )
