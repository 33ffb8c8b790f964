"""Random trajectory corpora and straight-line reward oracles shared by tests."""

import random
import re
import string

from kgrag.graph import KnowledgeGraph
from kgrag.protocol import advance, start
from kgrag.rollout import local_executor


def _msg_menu(rng, graph):
    ents = sorted(graph.entities)
    rels = sorted(graph.relations)
    e, r = rng.choice(ents), rng.choice(rels)
    return [
        f'<think>t</think><kg-query>get_tail_relations("{e}")</kg-query>',
        f'<think>t</think><kg-query>get_head_relations("{e}")</kg-query>',
        f'<think>t</think><kg-query>get_tail_entities("{e}", "{r}")</kg-query>',
        f'<think>t</think><kg-query>get_head_entities("{e}", "{r}")</kg-query>',
        f'<think>t</think><kg-query>get_tail_relations("nope_{e}")</kg-query>',
        f'<kg-query>get_tail_relations("{e}")</kg-query>',
        f'<think>t</think><kg-query>get_tail_relations("{e}")</kg-query><bogus>',
        "<think>t</think><kg-query>get_entity_info()</kg-query>",
        "rambling with no tags",
    ]


def _answer(rng, graph, gold):
    pool = sorted(graph.entities) + list(gold) + ["Atlantis"]
    picks = rng.sample(pool, k=rng.randint(0, 3))
    body = ", ".join(f'"{p}"' if rng.random() < 0.5 else p for p in picks)
    if rng.random() < 0.2:
        return f"<answer>{body}</answer>"  # no think block
    return f"<think>done</think><answer>{body}</answer>"


def random_trajectory(rng: random.Random, graph: KnowledgeGraph, gold, max_turns=5, rollout_index=0):
    s = start("s", "q?", max_turns, rollout_index=rollout_index)
    ex = local_executor(graph)
    while not s.terminated:
        if rng.random() < 0.25:
            s = advance(s, _answer(rng, graph, gold), ex, graph)
        else:
            s = advance(s, rng.choice(_msg_menu(rng, graph)), ex, graph)
    return s


def small_graph(rng: random.Random) -> KnowledgeGraph:
    ents = [f"E{i}" for i in range(8)]
    rels = ["a.b.c", "a.b.d", "x.y.z"]
    return KnowledgeGraph([(rng.choice(ents), rng.choice(rels), rng.choice(ents)) for _ in range(14)], entities=ents)


def corpus(seed: int, size: int, max_turns=5):
    rng = random.Random(seed)
    out = []
    for _ in range(size):
        g = small_graph(rng)
        gold = tuple(rng.sample(sorted(g.entities), k=rng.randint(1, 3)))
        out.append((random_trajectory(rng, g, gold, max_turns), gold))
    return out


# --- independent oracle ---------------------------------------------------------

def _norm(s):
    s = " ".join(s.casefold().split())
    return s.strip(string.punctuation + " ")


def oracle_split(answer_text):
    parts = re.split(r"[,\n]", answer_text)
    return {p for p in (_norm(x.strip().strip('"')) for x in parts) if p}


def oracle_rewards(traj, gold, w_fmt=0.5, w_kg=0.5, w_ans=0.5, w_f1=1.0, w_ret=1.0):
    """Straight-line per-turn and global rewards from the raw turn records."""
    gold_set = {_norm(g) for g in gold}
    n = len(traj.records)
    r_turn = []
    for i, rec in enumerate(traj.records):
        p = rec.parsed
        v_fmt = 1 if p.format_valid else 0
        v_kg = 1 if (p.answer_text is None and rec.observation is not None and rec.observation.status == "ok") else 0
        terminal_answer = i == n - 1 and not traj.budget_exhausted and p.answer_text is not None
        v_ans = 1 if (terminal_answer and p.format_valid and oracle_split(p.answer_text)) else 0
        r_turn.append(w_fmt * v_fmt + w_kg * v_kg + w_ans * v_ans)
    pred = set(traj.predicted_answers.entities) if traj.predicted_answers else set()
    tp = len(pred & gold_set)
    f1 = 0.0 if tp == 0 else 2 * (tp / len(pred)) * (tp / len(gold_set)) / ((tp / len(pred)) + (tp / len(gold_set)))
    v_ret = 0
    for rec in traj.records:
        if rec.observation is not None and rec.observation.status == "ok":
            if any(_norm(x) in gold_set for x in rec.observation.labels):
                v_ret = 1
    return r_turn, f1, v_ret, w_f1 * f1 + w_ret * v_ret
