"""Random graphs and KGQA fixtures with known reasoning paths."""

from __future__ import annotations

import random

from .graph import KnowledgeGraph, QASample, ReasoningPath

_DOMAINS = ("location", "people", "film", "music", "sports", "government")
_TYPES = ("location", "person", "film", "team", "country", "office")
_PROPS = ("contains", "containedby", "nationality", "director", "member", "capital", "founded_by", "spouse")


def random_graph(rng: random.Random, n_nodes: int, n_edges: int, n_relations: int = 8,
                 dotted: bool = True, prefix: str = "e") -> KnowledgeGraph:
    """Directed multigraph on ``n_nodes`` labelled ``{prefix}0..``; self-loops allowed."""
    if dotted:
        rels = sorted({f"{rng.choice(_DOMAINS)}.{rng.choice(_TYPES)}.{rng.choice(_PROPS)}" for _ in range(n_relations)})
    else:
        rels = [f"r{i}" for i in range(n_relations)]
    nodes = [f"{prefix}{i}" for i in range(n_nodes)]
    triples = [(rng.choice(nodes), rng.choice(rels), rng.choice(nodes)) for _ in range(n_edges)]
    return KnowledgeGraph(triples, entities=nodes)


def random_path(rng: random.Random, graph: KnowledgeGraph, max_hops: int, start: str | None = None) -> ReasoningPath | None:
    """Random forward walk of 1..max_hops edges; None if the start node is a sink."""
    if start is None:
        sources = sorted(graph.head_index)
        if not sources:
            return None
        start = rng.choice(sources)
    hops = rng.randint(1, max_hops)
    nodes, edges = [start], []
    for _ in range(hops):
        out = sorted(graph.head_index.get(nodes[-1], ()))
        if not out:
            break
        rel, nxt = rng.choice(out)
        edges.append(rel)
        nodes.append(nxt)
    if not edges:
        return None
    return ReasoningPath(tuple(nodes), tuple(edges))


def synthetic_dataset(n_samples: int = 25, seed: int = 0, max_hops: int = 3,
                      n_nodes: int = 40, n_edges: int = 120) -> list[QASample]:
    """KGQA samples whose single gold answer is the end of a sampled path.

    The path is made acyclic in its nodes so the answer differs from the anchor.
    """
    rng = random.Random(seed)
    out: list[QASample] = []
    while len(out) < n_samples:
        graph = random_graph(rng, n_nodes, n_edges, prefix=f"s{len(out)}_e")
        path = random_path(rng, graph, max_hops)
        if path is None or len(set(path.nodes)) != len(path.nodes):
            continue
        anchor, answer = path.nodes[0], path.nodes[-1]
        chain = " then ".join(r.rsplit(".", 1)[-1] for r in path.edges)
        out.append(QASample(
            sample_id=f"synth-{len(out):04d}",
            question=f"Starting from {anchor}, what do you reach by following {chain}?",
            anchor_entities=(anchor,),
            gold_answers=(answer,),
            graph=graph,
            gold_path=path,
        ))
    return out
