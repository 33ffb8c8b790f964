"""Command-line entry point: serve, ingest, rollout, score, credit, evaluate.

Every option can also be set through an environment variable named
``KGRAG_<SUBCOMMAND>_<OPTION>`` (e.g. ``KGRAG_SERVE_PORT``).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import functools
import io
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import click
import yaml

from .actions import DEFAULT_MAX_RESULTS, FORMAT_MODES
from .credit import CreditConfig, TokenBatch, TurnTokens, broadcast_to_tokens, compute_advantages, grpo_objective
from .graph import (
    DEFAULT_RADIUS, KnowledgeGraph, RejectedRow, dump_qa_dataset, extract_subgraph, load_qa_dataset,
    load_triples,
)
from .evaluation import evaluate as run_evaluation
from .protocol import TrajectoryState
from .rewards import RewardBreakdown, RewardConfig, score_trajectory
from .rollout import RandomPolicy, RemotePolicy, collect_rollouts, oracle_policy, AllRolloutsFailed

logger = logging.getLogger("kgrag")

DEFAULTS = {"max_turns": 5, "n": 1, "format_mode": "flat", "concurrency": 4, "seed": 0,
            "max_results": DEFAULT_MAX_RESULTS}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise click.UsageError(f"config {path} must be a mapping")
    return data


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON config file.")
    @click.option("--seed", type=int, help="Seed for stochastic policies.")
    @click.option("--concurrency", type=int, help="Worker bound for samples / remote calls.")
    @click.option("--max-turns", "max_turns", type=int, help="Turn budget H.")
    @click.option("--n", "n", type=int, help="Rollouts per question N.")
    @click.option("--format-mode", type=click.Choice(FORMAT_MODES), help="Relation rendering.")
    @functools.wraps(fn)
    def wrapper(*args, config_path, seed, concurrency, max_turns, n, format_mode, **kwargs):
        cfg = {**DEFAULTS, **_load_config(config_path)}
        for key, val in (("seed", seed), ("concurrency", concurrency), ("max_turns", max_turns),
                         ("n", n), ("format_mode", format_mode)):
            if val is not None:
                cfg[key] = val
        if cfg["max_turns"] < 1 or cfg["n"] < 1:
            raise click.UsageError("--max-turns and --n must be >= 1")
        return fn(*args, cfg=cfg, **kwargs)

    return wrapper


def _reward_config(cfg: dict) -> RewardConfig:
    try:
        return RewardConfig.from_mapping(cfg.get("reward"))
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc))


def _credit_config(cfg: dict, **overrides) -> CreditConfig:
    data = dict(cfg.get("credit") or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return CreditConfig.from_mapping(data)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc))


def _load_dataset(path: str):
    rejected: list[RejectedRow] = []
    samples = load_qa_dataset(path, rejected=rejected)
    for r in rejected:
        click.echo(f"warning: rejected row {r.line} ({r.sample_id}): {r.reason}", err=True)
    return samples


def _read_jsonl(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path: str, records) -> None:
    out = sys.stdout if path == "-" else open(path, "w", encoding="utf-8")
    try:
        for rec in records:
            out.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _make_policy(kind: str, cfg: dict, endpoint: str | None, model: str, temperature: float | None, evaluation: bool):
    if kind == "oracle":
        return lambda sample: oracle_policy(sample, cfg["max_turns"])
    if kind == "random":
        return RandomPolicy(seed=cfg["seed"])
    if not endpoint:
        raise click.UsageError("--policy remote needs --policy-endpoint")
    default_temp = 0.0 if evaluation else 1.0
    return RemotePolicy(endpoint, model=model, temperature=default_temp if temperature is None else temperature)


def _executor_factory(endpoint: str | None, format_mode: str):
    if not endpoint:
        return None
    from .service.client import ServiceClient

    client = ServiceClient(endpoint)
    return lambda sample: client.executor(sample.sample_id, format_mode)


policy_options = [
    click.option("--policy", "policy_kind", type=click.Choice(["oracle", "random", "remote"]), default="oracle", show_default=True),
    click.option("--policy-endpoint", help="Completion endpoint for --policy remote."),
    click.option("--model", default="default", show_default=True),
    click.option("--temperature", type=float, help="Sampling temperature (default 1.0 rollout, 0.0 evaluate)."),
    click.option("--endpoint", help="Retrieval service URL; in-process graphs when omitted."),
]


def with_policy_options(fn):
    for opt in reversed(policy_options):
        fn = opt(fn)
    return fn


@click.group(context_settings={"auto_envvar_prefix": "KGRAG", "help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True)
def main(verbose: int):
    """Knowledge-graph retrieval environment toolkit."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), help="QA jsonl served per sample.")
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), help="Triple file served as sample '*'.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, type=int, show_default=True)
@click.option("--result-cap", default=DEFAULT_MAX_RESULTS, type=int, show_default=True)
@click.option("--timeout", "timeout_s", default=5.0, type=float, show_default=True)
@common_options
def serve(dataset, graph_path, host, port, result_cap, timeout_s, cfg):
    """Start the retrieval service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    samples = _load_dataset(dataset) if dataset else []
    shared = None
    if graph_path:
        shared = load_triples(graph_path, "jsonl" if graph_path.endswith(".jsonl") else "tsv")
    app = create_app(samples, ServiceConfig(cfg["format_mode"], result_cap, timeout_s), shared_graph=shared)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@click.option("--qa", "qa_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--triples", "triples_path", type=click.Path(exists=True, dir_okay=False),
              help="Whole KG used for rows without inline triples or a graph reference.")
@click.option("--radius", default=DEFAULT_RADIUS, type=int, show_default=True)
@click.option("--seed-answers/--no-seed-answers", default=False, help="Also expand from gold answers.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@common_options
def ingest(qa_path, triples_path, radius, seed_answers, out, cfg):
    """Cut per-question subgraphs and write a self-contained QA jsonl."""
    graphs = {}
    raw = Path(qa_path).read_bytes()
    if triples_path:
        graphs["__kg__"] = load_triples(triples_path, "jsonl" if triples_path.endswith(".jsonl") else "tsv")
        rows = []
        for line in raw.decode("utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                if "triples" not in row and "graph" not in row:
                    row["graph"] = "__kg__"
                rows.append(json.dumps(row, ensure_ascii=False))
        raw = ("\n".join(rows) + "\n").encode("utf-8")
    rejected: list[RejectedRow] = []
    samples = load_qa_dataset(io.BytesIO(raw), graphs=graphs, base_dir=str(Path(qa_path).parent), rejected=rejected)
    for r in rejected:
        click.echo(f"warning: rejected row {r.line} ({r.sample_id}): {r.reason}", err=True)
    cut = []
    from dataclasses import replace

    for s in samples:
        seeds = set(s.anchor_entities) | (set(s.gold_answers) if seed_answers else set())
        sub = extract_subgraph(s.graph, seeds, radius)
        path = s.gold_path if s.gold_path is not None and s.gold_path.is_valid_in(sub) else None
        cut.append(replace(s, graph=sub, gold_path=path))
    Path(out).write_bytes(dump_qa_dataset(cut))
    click.echo(f"wrote {len(cut)} samples to {out} ({len(rejected)} rejected)")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, help="Trajectory jsonl ('-' for stdout).")
@with_policy_options
@common_options
def rollout(dataset, out, policy_kind, policy_endpoint, model, temperature, endpoint, cfg):
    """Collect N rollouts per sample and write trajectory records."""
    samples = _load_dataset(dataset)
    policy = _make_policy(policy_kind, cfg, policy_endpoint, model, temperature, evaluation=False)
    factory = _executor_factory(endpoint, cfg["format_mode"])
    records = []
    failed = 0
    for sample in samples:
        pol = policy if hasattr(policy, "generate") else policy(sample)
        try:
            group = collect_rollouts(
                sample, pol, cfg["n"], cfg["max_turns"], executor_factory=factory,
                concurrency=cfg["concurrency"], format_mode=cfg["format_mode"],
            )
        except AllRolloutsFailed as exc:
            failed += 1
            click.echo(f"warning: {exc}", err=True)
            continue
        records.extend(r.to_dict() for r in group.rollouts)
    _write_jsonl(out, records)
    if out != "-":
        click.echo(f"wrote {len(records)} trajectories ({failed} samples failed)")
    if samples and failed == len(samples):
        sys.exit(1)


def _gold_lookup(dataset: str | None) -> dict[str, tuple[str, ...]]:
    if not dataset:
        return {}
    return {s.sample_id: s.gold_answers for s in _load_dataset(dataset)}


@main.command()
@click.option("--trajectories", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), help="Gold answers, if not in the trajectories.")
@click.option("--out", default="-", show_default=True)
@common_options
def score(trajectories, dataset, out, cfg):
    """Attach reward breakdowns to trajectory records."""
    reward_cfg = _reward_config(cfg)
    gold = _gold_lookup(dataset)
    records = []
    for rec in _read_jsonl(trajectories):
        traj = TrajectoryState.from_dict(rec)
        answers = gold.get(traj.sample_id) or traj.gold_answers
        if not answers:
            raise click.ClickException(f"no gold answers for sample {traj.sample_id!r}")
        if traj.infra_failed:
            rec["rewards"] = None
        else:
            rec["rewards"] = score_trajectory(traj, answers, reward_cfg).to_dict()
        rec["reward_config"] = reward_cfg.to_dict()
        records.append(rec)
    _write_jsonl(out, records)


def _token_record_turns(rec: dict) -> list[TurnTokens]:
    turns = sorted(rec["turns"], key=lambda t: t["turn"])
    return [TurnTokens(t["logp_current"], t["logp_behavior"], t["logp_reference"], t["mask"]) for t in turns]


@main.command()
@click.option("--trajectories", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tokens", "tokens_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="-", show_default=True)
@click.option("--trajectory-level/--turn-level", default=None, help="Trajectory-wise instead of turn-wise advantages.")
@click.option("--lambda", "lam", type=float)
@click.option("--normalize", type=click.Choice(["sum", "token"]))
@common_options
def credit(trajectories, tokens_path, dataset, out, trajectory_level, lam, normalize, cfg):
    """Compute advantages and the surrogate objective for TokenBatch records."""
    reward_cfg = _reward_config(cfg)
    credit_cfg = _credit_config(cfg, trajectory_level=trajectory_level, lam=lam, normalize=normalize)
    gold = _gold_lookup(dataset)

    groups: dict[str, list[TrajectoryState]] = defaultdict(list)
    breakdown_for: dict[tuple[str, int], RewardBreakdown | None] = {}
    for rec in _read_jsonl(trajectories):
        traj = TrajectoryState.from_dict(rec)
        groups[traj.sample_id].append(traj)
        key = (traj.sample_id, traj.rollout_index)
        if traj.infra_failed:
            breakdown_for[key] = None
        elif rec.get("rewards"):
            breakdown_for[key] = RewardBreakdown.from_dict(rec["rewards"])
        else:
            answers = gold.get(traj.sample_id) or traj.gold_answers
            if not answers:
                raise click.ClickException(f"no gold answers for sample {traj.sample_id!r}")
            breakdown_for[key] = score_trajectory(traj, answers, reward_cfg)

    token_recs = {(r["sample_id"], r["rollout_index"]): r for r in _read_jsonl(tokens_path)}
    out_records = []
    total = 0.0
    for sample_id in sorted(groups):
        trajs = sorted(groups[sample_id], key=lambda t: t.rollout_index)
        keys = [(sample_id, t.rollout_index) for t in trajs]
        breakdowns = [breakdown_for[k] for k in keys]
        table = compute_advantages(breakdowns, credit_cfg)
        per_rollout = []
        for k, b in zip(keys, breakdowns):
            if b is None:
                per_rollout.append(None)
                continue
            if k not in token_recs:
                raise click.ClickException(f"no token record for sample {k[0]!r} rollout {k[1]}")
            per_rollout.append(_token_record_turns(token_recs[k]))
        batch = TokenBatch.from_turns(per_rollout)
        try:
            token_adv = broadcast_to_tokens(table, batch)
            result = grpo_objective(batch, token_adv, credit_cfg)
        except ValueError as exc:
            raise click.ClickException(f"sample {sample_id!r}: {exc}")
        total += result.value
        for idx, (k, turns) in enumerate(zip(keys, per_rollout)):
            if turns is None:
                continue
            rec = dict(token_recs[k])
            sel = batch.rollout_index == idx
            rec["turn_returns"] = table.returns[idx].tolist()
            rec["turn_advantages"] = table.advantages[idx].tolist()
            rec["token_advantages"] = token_adv[sel].tolist()
            rec["objective_terms"] = result.terms[sel].tolist()
            rec["objective"] = float(result.terms[sel].sum())
            rec["group_baseline"] = {"mean": table.mean, "std": table.std, "count": table.count}
            rec["credit_config"] = credit_cfg.to_dict()
            out_records.append(rec)
    _write_jsonl(out, out_records)
    if out != "-":
        click.echo(f"objective={total!r} over {len(groups)} groups")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="-", show_default=True, help="Report JSON path ('-' for stdout).")
@click.option("--table/--no-table", default=False, help="Also print the metric table.")
@click.option("--macro/--micro", default=False)
@click.option("--trajectories", "traj_out", help="Optionally persist the evaluated trajectories.")
@with_policy_options
@common_options
def evaluate(dataset, out, table, macro, traj_out, policy_kind, policy_endpoint, model, temperature, endpoint, cfg):
    """Full loop: rollouts, scoring and a MetricsReport."""
    samples = _load_dataset(dataset)
    if not samples:
        raise click.ClickException("dataset is empty")
    policy = _make_policy(policy_kind, cfg, policy_endpoint, model, temperature, evaluation=True)
    collected = []
    report = run_evaluation(
        samples, policy, cfg["n"], cfg["max_turns"],
        reward_config=_reward_config(cfg),
        executor_factory=_executor_factory(endpoint, cfg["format_mode"]),
        concurrency=cfg["concurrency"],
        format_mode=cfg["format_mode"],
        macro=macro,
        dataset_name=Path(dataset).stem,
        extra_config={"policy": policy_kind, "seed": cfg["seed"]},
        on_group=(lambda s, g: collected.append(g)) if traj_out else None,
    )
    text = report.to_json()
    if out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text, encoding="utf-8")
    if table:
        click.echo(report.render_table(), nl=False, err=(out == "-"))
    if traj_out:
        recs = []
        for g in sorted(collected, key=lambda g: g.sample_id):
            for r, b in zip(g.rollouts, g.breakdowns or []):
                d = r.to_dict()
                d["rewards"] = b.to_dict() if b is not None else None
                recs.append(d)
        _write_jsonl(traj_out, recs)


@main.command()
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--samples", "n_samples", default=25, show_default=True, type=int)
@click.option("--max-hops", default=3, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def synth(out, n_samples, max_hops, seed):
    """Write a synthetic QA jsonl with known reasoning paths (for smoke runs)."""
    from .synthetic import synthetic_dataset

    Path(out).write_bytes(dump_qa_dataset(synthetic_dataset(n_samples, seed=seed, max_hops=max_hops)))
    click.echo(f"wrote {n_samples} samples to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
