"""Triple store, per-question subgraphs and dataset ingestion."""

from __future__ import annotations

import io
import json
import logging
import os
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import BinaryIO, Iterable, Mapping, Sequence, Union

from .normalize import normalize

logger = logging.getLogger(__name__)

Triple = tuple[str, str, str]
Source = Union[bytes, str, os.PathLike, BinaryIO]

DEFAULT_RADIUS = 2
TRIPLE_FORMATS = ("tsv", "jsonl")


class TripleFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class QADatasetError(ValueError):
    pass


class KnowledgeGraph:
    """Immutable directed labeled graph with head and tail adjacency indexes.

    ``head_index[e]`` holds the ``(relation, tail)`` pairs of edges leaving ``e``;
    ``tail_index[e]`` holds the ``(relation, head)`` pairs of edges entering it.
    """

    __slots__ = (
        "_triples", "_entities", "_relations", "_head_index", "_tail_index",
        "_out", "_in", "_out_rel", "_in_rel", "__dict__",
    )

    def __init__(self, triples: Iterable[Sequence[str]] = (), entities: Iterable[str] = ()):
        tset: set[Triple] = set()
        for t in triples:
            h, r, e = t
            for label in (h, r, e):
                if not isinstance(label, str) or not label:
                    raise ValueError(f"labels must be non-empty strings, got {t!r}")
            tset.add((h, r, e))
        ents = set(entities)
        for label in ents:
            if not isinstance(label, str) or not label:
                raise ValueError(f"entity labels must be non-empty strings, got {label!r}")

        head: dict[str, set] = defaultdict(set)
        tail: dict[str, set] = defaultdict(set)
        out: dict[tuple[str, str], list] = defaultdict(list)
        inc: dict[tuple[str, str], list] = defaultdict(list)
        rels = set()
        for h, r, e in tset:
            ents.add(h)
            ents.add(e)
            rels.add(r)
            head[h].add((r, e))
            tail[e].add((r, h))
            out[(h, r)].append(e)
            inc[(r, e)].append(h)

        self._triples = frozenset(tset)
        self._entities = frozenset(ents)
        self._relations = frozenset(rels)
        self._head_index = MappingProxyType({k: frozenset(v) for k, v in head.items()})
        self._tail_index = MappingProxyType({k: frozenset(v) for k, v in tail.items()})
        self._out = {k: tuple(sorted(v)) for k, v in out.items()}
        self._in = {k: tuple(sorted(v)) for k, v in inc.items()}
        self._out_rel = {k: tuple(sorted({r for r, _ in v})) for k, v in head.items()}
        self._in_rel = {k: tuple(sorted({r for r, _ in v})) for k, v in tail.items()}

    @property
    def triples(self) -> frozenset[Triple]:
        return self._triples

    @property
    def entities(self) -> frozenset[str]:
        return self._entities

    @property
    def relations(self) -> frozenset[str]:
        return self._relations

    @property
    def head_index(self) -> Mapping[str, frozenset[tuple[str, str]]]:
        return self._head_index

    @property
    def tail_index(self) -> Mapping[str, frozenset[tuple[str, str]]]:
        return self._tail_index

    # Sorted lookups used by the retrieval actions.
    def out_relations(self, entity: str) -> tuple[str, ...]:
        return self._out_rel.get(entity, ())

    def in_relations(self, entity: str) -> tuple[str, ...]:
        return self._in_rel.get(entity, ())

    def tails(self, entity: str, relation: str) -> tuple[str, ...]:
        return self._out.get((entity, relation), ())

    def heads(self, relation: str, entity: str) -> tuple[str, ...]:
        return self._in.get((relation, entity), ())

    @cached_property
    def normalized_entities(self) -> frozenset[str]:
        return frozenset(normalize(e) for e in self._entities)

    def stats(self) -> dict[str, int]:
        return {
            "entities": len(self._entities),
            "relations": len(self._relations),
            "triples": len(self._triples),
        }

    def __len__(self) -> int:
        return len(self._triples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self._triples == other._triples and self._entities == other._entities

    def __hash__(self) -> int:
        return hash((self._triples, self._entities))

    def __repr__(self) -> str:
        s = self.stats()
        return f"KnowledgeGraph(entities={s['entities']}, relations={s['relations']}, triples={s['triples']})"


@dataclass(frozen=True)
class ReasoningPath:
    nodes: tuple[str, ...]
    edges: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        if len(self.nodes) != len(self.edges) + 1:
            raise ValueError("a path needs exactly one more node than edges")

    def __len__(self) -> int:
        return len(self.edges)

    def hops(self) -> list[Triple]:
        return [(self.nodes[i], r, self.nodes[i + 1]) for i, r in enumerate(self.edges)]

    def is_valid_in(self, graph: KnowledgeGraph) -> bool:
        if self.nodes[0] not in graph.entities:
            return False
        return all(t in graph.triples for t in self.hops())

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "edges": list(self.edges)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReasoningPath":
        return cls(tuple(d["nodes"]), tuple(d.get("edges", ())))


def dedupe_answers(answers: Iterable[str]) -> tuple[str, ...]:
    seen: set[str] = set()
    out = []
    for a in answers:
        key = normalize(a)
        if key and key not in seen:
            seen.add(key)
            out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class QASample:
    sample_id: str
    question: str
    anchor_entities: tuple[str, ...]
    gold_answers: tuple[str, ...]
    graph: KnowledgeGraph = field(repr=False, compare=False)
    gold_path: ReasoningPath | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchor_entities", tuple(self.anchor_entities))
        object.__setattr__(self, "gold_answers", dedupe_answers(self.gold_answers))
        if not self.anchor_entities:
            raise QADatasetError(f"sample {self.sample_id!r}: no anchor entities")
        if not self.gold_answers:
            raise QADatasetError(f"sample {self.sample_id!r}: empty gold answer set")
        missing = [a for a in self.anchor_entities if a not in self.graph.entities]
        if missing:
            raise QADatasetError(
                f"sample {self.sample_id!r}: anchor {missing[0]!r} not found in graph"
            )
        if self.gold_path is not None and not self.gold_path.is_valid_in(self.graph):
            raise QADatasetError(f"sample {self.sample_id!r}: gold path not valid in graph")


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _rows(data: bytes) -> Iterable[tuple[int, str]]:
    text = data.decode("utf-8")
    if text.startswith("﻿"):
        text = text[1:]
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if line.strip():
            yield lineno, line


def load_triples(source: Source, format: str = "tsv") -> KnowledgeGraph:
    """Parse a tsv (``head\\trelation\\ttail``) or jsonl triple file into a graph."""
    if format not in TRIPLE_FORMATS:
        raise ValueError(f"unknown triple format {format!r}")
    triples = []
    for lineno, line in _rows(_read_bytes(source)):
        if format == "tsv":
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleFormatError(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TripleFormatError(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise TripleFormatError(lineno, "expected a JSON object")
            try:
                parts = [obj["head"], obj["relation"], obj["tail"]]
            except KeyError as exc:
                raise TripleFormatError(lineno, f"missing key {exc.args[0]!r}") from None
            if not all(isinstance(p, str) for p in parts):
                raise TripleFormatError(lineno, "head/relation/tail must be strings")
        if not all(parts):
            raise TripleFormatError(lineno, "empty field")
        triples.append(tuple(parts))
    return KnowledgeGraph(triples)


def dump_triples(graph: KnowledgeGraph, format: str = "tsv") -> bytes:
    if format not in TRIPLE_FORMATS:
        raise ValueError(f"unknown triple format {format!r}")
    buf = io.StringIO()
    for h, r, t in sorted(graph.triples):
        if format == "tsv":
            if any(c in label for label in (h, r, t) for c in "\t\n\r"):
                raise ValueError(f"label not representable in tsv: {(h, r, t)!r}")
            buf.write(f"{h}\t{r}\t{t}\n")
        else:
            buf.write(json.dumps({"head": h, "relation": r, "tail": t}, ensure_ascii=False))
            buf.write("\n")
    return buf.getvalue().encode("utf-8")


def extract_subgraph(graph: KnowledgeGraph, seeds: Iterable[str], radius: int = DEFAULT_RADIUS) -> KnowledgeGraph:
    """Induced subgraph on every entity within undirected distance ``radius`` of a seed.

    Seeds absent from the graph are ignored.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    frontier = deque((s, 0) for s in sorted(set(seeds)) if s in graph.entities)
    reached = {s for s, _ in frontier}
    while frontier:
        node, dist = frontier.popleft()
        if dist == radius:
            continue
        neighbours = [t for _, t in graph.head_index.get(node, ())]
        neighbours += [h for _, h in graph.tail_index.get(node, ())]
        for nb in neighbours:
            if nb not in reached:
                reached.add(nb)
                frontier.append((nb, dist + 1))
    kept = [
        (h, r, t)
        for h in reached
        for r, t in graph.head_index.get(h, ())
        if t in reached
    ]
    return KnowledgeGraph(kept, entities=reached)


@dataclass(frozen=True)
class RejectedRow:
    line: int
    sample_id: str | None
    reason: str


_REQUIRED = ("sample_id", "question", "anchor_entities", "gold_answers")


def _graph_format(ref: str) -> str:
    return "jsonl" if ref.endswith(".jsonl") else "tsv"


def load_qa_dataset(
    source: Source,
    *,
    graphs: Mapping[str, KnowledgeGraph] | None = None,
    base_dir: str | os.PathLike | None = None,
    rejected: list[RejectedRow] | None = None,
) -> list[QASample]:
    """Load QA jsonl rows into samples.

    A row carries either inline ``triples`` (list of ``[head, relation, tail]``)
    or a ``graph`` reference: a key of ``graphs`` or a triple-file path relative
    to ``base_dir``. Rows sharing a reference share one graph object. Invalid
    rows are skipped and appended to ``rejected`` (logged when it is None).
    """
    if base_dir is None and isinstance(source, (str, os.PathLike)):
        base_dir = os.path.dirname(os.fspath(source))
    cache: dict[str, KnowledgeGraph] = dict(graphs or {})
    samples: list[QASample] = []
    seen_ids: set[str] = set()

    def reject(line: int, sid, reason: str):
        row = RejectedRow(line, sid, reason)
        if rejected is None:
            logger.warning("rejected QA row %d (%s): %s", line, sid, reason)
        else:
            rejected.append(row)

    for lineno, line in _rows(_read_bytes(source)):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            reject(lineno, None, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            reject(lineno, None, "expected a JSON object")
            continue
        sid = obj.get("sample_id")
        missing = [k for k in _REQUIRED if k not in obj]
        if "triples" not in obj and "graph" not in obj:
            missing.append("triples|graph")
        if missing:
            reject(lineno, sid, f"missing field(s): {', '.join(missing)}")
            continue
        if sid in seen_ids:
            reject(lineno, sid, "duplicate sample_id")
            continue
        try:
            if "triples" in obj:
                graph = KnowledgeGraph(
                    (tuple(t) for t in obj["triples"]), entities=obj.get("entities", ())
                )
            else:
                ref = obj["graph"]
                if ref not in cache:
                    path = os.path.join(base_dir or ".", ref)
                    cache[ref] = load_triples(path, _graph_format(ref))
                graph = cache[ref]
            gold_path = ReasoningPath.from_dict(obj["gold_path"]) if obj.get("gold_path") else None
            sample = QASample(
                sample_id=str(sid),
                question=obj["question"],
                anchor_entities=tuple(obj["anchor_entities"]),
                gold_answers=tuple(obj["gold_answers"]),
                graph=graph,
                gold_path=gold_path,
            )
        except (QADatasetError, TripleFormatError, ValueError, TypeError, OSError) as exc:
            reject(lineno, sid, str(exc))
            continue
        seen_ids.add(sample.sample_id)
        samples.append(sample)
    return samples


def sample_to_row(sample: QASample, *, include_gold: bool = True) -> dict:
    row = {
        "sample_id": sample.sample_id,
        "question": sample.question,
        "anchor_entities": list(sample.anchor_entities),
        "triples": [list(t) for t in sorted(sample.graph.triples)],
    }
    linked = {x for h, _, t in sample.graph.triples for x in (h, t)}
    isolated = sorted(sample.graph.entities - linked)
    if isolated:
        row["entities"] = isolated
    if include_gold:
        row["gold_answers"] = list(sample.gold_answers)
        if sample.gold_path is not None:
            row["gold_path"] = sample.gold_path.to_dict()
    return row


def dump_qa_dataset(samples: Iterable[QASample]) -> bytes:
    lines = [json.dumps(sample_to_row(s), ensure_ascii=False) for s in samples]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
