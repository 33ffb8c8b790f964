"""The four schema-agnostic 1-hop retrieval actions and their error catalogue."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable, Sequence

from .graph import KnowledgeGraph, ReasoningPath

DEFAULT_MAX_RESULTS = 200
FORMAT_MODES = ("flat", "hierarchical")


class ActionKind(str, Enum):
    GET_TAIL_RELATIONS = "get_tail_relations"
    GET_HEAD_RELATIONS = "get_head_relations"
    GET_TAIL_ENTITIES = "get_tail_entities"
    GET_HEAD_ENTITIES = "get_head_entities"

    @property
    def arity(self) -> int:
        return 1 if self.name.endswith("RELATIONS") else 2


ACTION_NAMES = tuple(k.value for k in ActionKind)


class ErrorKind(str, Enum):
    INVALID_ACTION = "Invalid Action"
    MISSING_FIELDS = "Missing Required Fields"
    WRONG_ARG_COUNT = "Wrong Argument Count"
    SAMPLE_MISSING = "Sample Missing"
    ENTITY_NOT_FOUND = "Entity Not in KG"
    INVALID_RELATION = "Invalid Relation"
    NO_RELATIONS = "No Relations Found"
    NO_ENTITIES = "No Entities Found"
    TIMEOUT = "Timeout"


def _load_catalogue() -> dict:
    raw = resources.files("kgrag").joinpath("data/error_catalogue.json").read_text("utf-8")
    return json.loads(raw)


CATALOGUE = _load_catalogue()
_TEMPLATES = {ErrorKind(e["kind"]): (e["code"], e["template"]) for e in CATALOGUE["entries"]}
_TEMPLATES[ErrorKind.TIMEOUT] = ("KG_SERVER_ERROR", "Request timed out after {seconds}s")


class KGError(Exception):
    """A catalogue error raised by an action; carries code and rendered text."""

    def __init__(self, kind: ErrorKind, **fields):
        code, template = _TEMPLATES[kind]
        self.kind = kind
        self.code = code
        self.text = template.format(**fields)
        super().__init__(f"{code}: {self.text}")


@dataclass(frozen=True)
class RetrievalAction:
    name: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))

    @property
    def kind(self) -> ActionKind | None:
        try:
            return ActionKind(self.name)
        except ValueError:
            return None

    def render(self) -> str:
        quoted = ", ".join('"' + a.replace("\\", "\\\\").replace('"', '\\"') + '"' for a in self.args)
        return f"{self.name}({quoted})"

    def to_dict(self) -> dict:
        return {"name": self.name, "args": list(self.args)}

    @classmethod
    def from_dict(cls, d) -> "RetrievalAction":
        return cls(d["name"], tuple(d.get("args", ())))


@dataclass(frozen=True)
class Observation:
    status: str  # "ok" | "error"
    text: str
    labels: tuple[str, ...] = ()
    error_code: str | None = None
    error_kind: str | None = None
    truncated: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def from_error(cls, err: KGError) -> "Observation":
        return cls("error", err.text, error_code=err.code, error_kind=err.kind.value)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "text": self.text,
            "labels": list(self.labels),
            "error_code": self.error_code,
            "error_kind": self.error_kind,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d) -> "Observation":
        return cls(
            d["status"], d["text"], tuple(d.get("labels", ())),
            d.get("error_code"), d.get("error_kind"), d.get("truncated", 0),
        )


def _require_entity(graph: KnowledgeGraph, entity: str) -> None:
    if entity not in graph.entities:
        raise KGError(ErrorKind.ENTITY_NOT_FOUND, entity=entity)


def _require_relation(graph: KnowledgeGraph, relation: str) -> None:
    if relation not in graph.relations:
        raise KGError(ErrorKind.INVALID_RELATION, relation=relation)


def get_tail_relations(graph: KnowledgeGraph, entity: str) -> tuple[str, ...]:
    """Relations on edges leaving ``entity``, sorted."""
    _require_entity(graph, entity)
    found = graph.out_relations(entity)
    if not found:
        raise KGError(ErrorKind.NO_RELATIONS, direction="tail", entity=entity)
    return found


def get_head_relations(graph: KnowledgeGraph, entity: str) -> tuple[str, ...]:
    """Relations on edges entering ``entity``, sorted."""
    _require_entity(graph, entity)
    found = graph.in_relations(entity)
    if not found:
        raise KGError(ErrorKind.NO_RELATIONS, direction="head", entity=entity)
    return found


def get_tail_entities(graph: KnowledgeGraph, entity: str, relation: str) -> tuple[str, ...]:
    _require_entity(graph, entity)
    _require_relation(graph, relation)
    found = graph.tails(entity, relation)
    if not found:
        raise KGError(
            ErrorKind.NO_ENTITIES, direction="tail", relation=relation, anchor_role="head", entity=entity
        )
    return found


def get_head_entities(graph: KnowledgeGraph, relation: str, entity: str) -> tuple[str, ...]:
    _require_entity(graph, entity)
    _require_relation(graph, relation)
    found = graph.heads(relation, entity)
    if not found:
        raise KGError(
            ErrorKind.NO_ENTITIES, direction="head", relation=relation, anchor_role="tail", entity=entity
        )
    return found


def _split_relation(rel: str) -> tuple[str, str, str | None] | None:
    parts = rel.split(".", 2)
    if len(parts) < 2 or not parts[0] or not parts[1]:
        return None
    return parts[0], parts[1], parts[2] if len(parts) == 3 else None


def format_relations_hierarchical(relations: Iterable[str]) -> str:
    """Render dotted relations as a domain / type tree.

    ``location.location.contains`` goes under domain ``location`` on the
    ``location: ...`` type line; anything after the second dot stays in the
    property name. Undotted relations go on one trailing unindented line.
    """
    tree: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    bare_types: dict[str, set[str]] = defaultdict(set)
    flat = []
    for rel in sorted(set(relations)):
        split = _split_relation(rel)
        if split is None:
            flat.append(rel)
            continue
        domain, typ, prop = split
        if prop is None:
            bare_types[domain].add(typ)
            tree[domain]  # noqa: B018 - registers the domain
        else:
            tree[domain][typ].append(prop)
    lines = []
    for domain in sorted(tree):
        lines.append(domain)
        types = sorted(set(tree[domain]) | bare_types[domain])
        for typ in types:
            if typ in bare_types[domain]:
                lines.append(f"  {typ}")
            if typ in tree[domain]:
                lines.append(f"  {typ}: {', '.join(sorted(tree[domain][typ]))}")
    if flat:
        lines.append(", ".join(flat))
    return "\n".join(lines)


def parse_relations_hierarchical(text: str) -> set[str]:
    """Inverse of :func:`format_relations_hierarchical`."""
    lines = [ln for ln in text.split("\n") if ln and not ln.startswith("…(")]
    out: set[str] = set()
    domain = None
    for i, line in enumerate(lines):
        if line.startswith("  "):
            body = line[2:]
            typ, sep, props = body.partition(": ")
            if sep:
                out.update(f"{domain}.{typ}.{p}" for p in props.split(", "))
            else:
                out.add(f"{domain}.{body}")
        elif i + 1 < len(lines) and lines[i + 1].startswith("  "):
            domain = line
        else:
            out.update(line.split(", "))
    return out


_HEADERS = {
    ActionKind.GET_TAIL_RELATIONS: 'Tail relations for entity "{0}"',
    ActionKind.GET_HEAD_RELATIONS: 'Head relations for entity "{0}"',
    ActionKind.GET_TAIL_ENTITIES: 'Tail entities for relation "{1}" with head "{0}"',
    ActionKind.GET_HEAD_ENTITIES: 'Head entities for relation "{1}" with tail "{0}"',
}

_MISSING = {1: "entity_id", 2: "relation_name"}


def _check_arity(action: RetrievalAction, kind: ActionKind) -> None:
    args = action.args
    present = [a for a in args if a]
    if len(args) > kind.arity:
        expected = "one entity argument" if kind.arity == 1 else "entity and relation arguments"
        raise KGError(ErrorKind.WRONG_ARG_COUNT, action=kind.value, expected=expected)
    if len(present) < kind.arity or len(present) != len(args):
        fields = [_MISSING[i + 1] for i in range(kind.arity) if i >= len(args) or not args[i]]
        raise KGError(ErrorKind.MISSING_FIELDS, action=kind.value, fields=", ".join(fields))


def _render(kind: ActionKind, args: Sequence[str], labels: Sequence[str], hidden: int, format_mode: str) -> str:
    header = _HEADERS[kind].format(*args)
    more = f"…({hidden} more)" if hidden else ""
    if format_mode == "hierarchical" and kind.arity == 1:
        body = format_relations_hierarchical(labels)
        return f"{header}:\n{body}" + (f"\n{more}" if more else "")
    body = ", ".join(labels)
    if more:
        body = f"{body}, {more}"
    return f"{header}: {body}"


def execute(
    graph: KnowledgeGraph,
    action: RetrievalAction,
    format_mode: str = "flat",
    max_results: int = DEFAULT_MAX_RESULTS,
) -> Observation:
    """Run one action against ``graph`` and render the observation.

    Entity-returning actions take ``(entity, relation)`` as their arguments.
    Failures come back as error observations, never as exceptions.
    """
    if format_mode not in FORMAT_MODES:
        raise ValueError(f"unknown format mode {format_mode!r}")
    kind = action.kind
    try:
        if kind is None:
            raise KGError(ErrorKind.INVALID_ACTION, action=action.name)
        _check_arity(action, kind)
        if kind is ActionKind.GET_TAIL_RELATIONS:
            labels = get_tail_relations(graph, action.args[0])
        elif kind is ActionKind.GET_HEAD_RELATIONS:
            labels = get_head_relations(graph, action.args[0])
        elif kind is ActionKind.GET_TAIL_ENTITIES:
            labels = get_tail_entities(graph, action.args[0], action.args[1])
        else:
            labels = get_head_entities(graph, action.args[1], action.args[0])
    except KGError as err:
        return Observation.from_error(err)
    hidden = max(0, len(labels) - max_results)
    shown = tuple(labels[:max_results]) if hidden else tuple(labels)
    text = _render(kind, action.args, shown, hidden, format_mode)
    return Observation("ok", text, shown, truncated=hidden)


def realize_path(graph: KnowledgeGraph, path: ReasoningPath) -> list[RetrievalAction]:
    """Forward ``get_tail_entities`` calls that walk ``path`` hop by hop."""
    if not path.is_valid_in(graph):
        raise ValueError("path is not valid in the graph")
    return [
        RetrievalAction(ActionKind.GET_TAIL_ENTITIES.value, (path.nodes[i], rel))
        for i, rel in enumerate(path.edges)
    ]
