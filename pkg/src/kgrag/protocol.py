"""Multi-turn dialogue grammar: prompt, message parsing, observation wrapping, turn budget."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable

from .actions import Observation, RetrievalAction
from .graph import KnowledgeGraph
from .normalize import normalize

Executor = Callable[[RetrievalAction], Observation]

SERVER_INSTRUCTION = (
    "If you encounter a KG-related error, read the error message carefully and correct your query.\n"
    "\n"
    "Use exactly these query functions:\n"
    "- get_tail_relations(entity) : Returns relations where the entity is the subject/head.\n"
    "- get_head_relations(entity) : Returns relations where the entity is the object/tail.\n"
    "- get_tail_entities(entity, relation) : Returns entities connected to the given entity by the specified relation.\n"
    "- get_head_entities(entity, relation) : Returns entities from which the given entity is connected by the specified relation."
)

PROMPT_TEMPLATE = (
    "You are a helpful assistant. Answer the given question. You can query from knowledge base "
    "provided to you to answer the question. You can query knowledge up to {max_turns} times. "
    "You must first conduct reasoning inside <think>...</think>. If you need to query knowledge, "
    "you can set a query statement between <kg-query>...</kg-query> to query from knowledge base "
    "after <think>...</think>. When you have the final answer, you can output the answer inside "
    "<answer>...</answer>.\n"
    "KG Query Server Instruction : {instruction}\n"
    "Question: {question}.\n"
    "Assistant:"
)

NO_ACTION_FEEDBACK = (
    "No valid action found. Reason inside <think>...</think>, then either query with "
    "<kg-query>function(\"arg\")</kg-query> or answer with <answer>...</answer>."
)


class ProtocolError(RuntimeError):
    pass


def build_initial_prompt(question: str, max_turns: int, server_instruction: str = SERVER_INSTRUCTION) -> str:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    return PROMPT_TEMPLATE.format(max_turns=max_turns, instruction=server_instruction, question=question)


# --- parsing -----------------------------------------------------------------

_BLOCK = re.compile(r"<(think|kg-query|answer)>(.*?)</\1>", re.DOTALL)
_TAG = re.compile(r"<(/?)([A-Za-z][A-Za-z0-9_-]*)>")
_CALL = re.compile(r"^\s*([^\s(]+)\s*\((.*)\)\s*$", re.DOTALL)
_KNOWN = {"think", "kg-query", "answer"}


@dataclass(frozen=True)
class ParsedTurn:
    think_text: str | None = None
    action: RetrievalAction | None = None
    answer_text: str | None = None
    format_valid: bool = False
    violations: tuple[str, ...] = ()

    @property
    def is_answer(self) -> bool:
        return self.answer_text is not None

    @property
    def is_retrieval(self) -> bool:
        return self.action is not None and self.answer_text is None

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "action": self.action.to_dict() if self.action else None,
            "answer_text": self.answer_text,
            "format_valid": self.format_valid,
            "violations": list(self.violations),
        }

    @classmethod
    def from_dict(cls, d) -> "ParsedTurn":
        return cls(
            d.get("think_text"),
            RetrievalAction.from_dict(d["action"]) if d.get("action") else None,
            d.get("answer_text"),
            bool(d.get("format_valid")),
            tuple(d.get("violations", ())),
        )


def split_arguments(text: str) -> list[str]:
    """Split a call's argument list on commas, honouring quotes and backslash escapes."""
    args: list[str] = []
    i, n = 0, len(text)
    if not text.strip():
        return args
    while True:
        while i < n and text[i].isspace():
            i += 1
        if i < n and text[i] in "\"'":
            quote, buf = text[i], []
            i += 1
            while i < n and text[i] != quote:
                if text[i] == "\\" and i + 1 < n:
                    i += 1
                buf.append(text[i])
                i += 1
            i += 1
            # anything between the closing quote and the comma is dropped
            while i < n and text[i] != ",":
                i += 1
            args.append("".join(buf))
        else:
            j = text.find(",", i)
            j = n if j < 0 else j
            args.append(text[i:j].strip())
            i = j
        if i >= n:
            return args
        i += 1  # past the comma


def parse_query(text: str) -> tuple[RetrievalAction, bool]:
    """Parse ``name("a"[, "b"])``; the flag is False when the call syntax is broken."""
    m = _CALL.match(text)
    if not m:
        return RetrievalAction(text.strip(), ()), False
    return RetrievalAction(m.group(1), tuple(split_arguments(m.group(2)))), True


def parse_message(text: str) -> ParsedTurn:
    """Total parser for one agent message; problems become violation codes."""
    blocks = [(m.group(1), m.group(2), m.start()) for m in _BLOCK.finditer(text)]
    rest = _BLOCK.sub(" ", text)
    violations = []

    thinks = [b for b in blocks if b[0] == "think"]
    queries = [b for b in blocks if b[0] == "kg-query"]
    answers = [b for b in blocks if b[0] == "answer"]
    actions = queries + answers

    if not thinks:
        violations.append("missing_think")
    elif len(thinks) > 1:
        violations.append("multiple_think")
    if not actions:
        violations.append("missing_action")
    elif len(actions) > 1:
        violations.append("multiple_actions")
    if thinks and actions and min(b[2] for b in actions) < thinks[0][2]:
        violations.append("think_after_action")
    for closing, name in _TAG.findall(rest):
        code = "unclosed_tag" if name in _KNOWN else "unknown_tag"
        if code not in violations:
            violations.append(code)

    action = answer_text = None
    if answers:
        answer_text = answers[0][1].strip()
    elif queries:
        action, well_formed = parse_query(queries[0][1])
        if not well_formed:
            violations.append("malformed_query")
    return ParsedTurn(
        think_text=thinks[0][1].strip() if thinks else None,
        action=action,
        answer_text=answer_text,
        format_valid=not violations,
        violations=tuple(violations),
    )


# --- observation wrapping ----------------------------------------------------

def auto_close(text: str) -> str:
    """Close unterminated tags and escape stray closing tags."""
    out = []
    stack: list[str] = []
    pos = 0
    for m in _TAG.finditer(text):
        out.append(text[pos:m.start()])
        pos = m.end()
        closing, name = m.group(1), m.group(2)
        if not closing:
            stack.append(name)
            out.append(m.group(0))
        elif name in stack:
            while stack[-1] != name:
                out.append(f"</{stack.pop()}>")
            stack.pop()
            out.append(m.group(0))
        else:
            out.append(f"&lt;/{name}&gt;")
    out.append(text[pos:])
    out.extend(f"</{name}>" for name in reversed(stack))
    return "".join(out)


def is_balanced(text: str) -> bool:
    stack: list[str] = []
    for closing, name in _TAG.findall(text):
        if not closing:
            stack.append(name)
        elif not stack or stack.pop() != name:
            return False
    return not stack


def wrap_observation(obs: Observation | None) -> str:
    if obs is None:
        return f"<information><error>{NO_ACTION_FEEDBACK}</error></information>"
    body = auto_close(obs.text)
    if obs.ok:
        return f"<information>{body}</information>"
    return f"<information><error>{body}</error></information>"


# --- answers -----------------------------------------------------------------

_QUOTES = "\"'“”‘’`"


@dataclass(frozen=True)
class AnswerSet:
    raw_text: str = ""
    entities: tuple[str, ...] = ()
    resolved: tuple[bool, ...] = ()

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)

    def as_set(self) -> frozenset[str]:
        return frozenset(self.entities)

    def to_dict(self) -> dict:
        return {"raw_text": self.raw_text, "entities": list(self.entities), "resolved": list(self.resolved)}

    @classmethod
    def from_dict(cls, d) -> "AnswerSet":
        return cls(d.get("raw_text", ""), tuple(d.get("entities", ())), tuple(d.get("resolved", ())))

    @classmethod
    def of(cls, items, graph: KnowledgeGraph | None = None) -> "AnswerSet":
        """Build from already-separated strings (normalized and deduplicated here)."""
        ents = []
        for item in items:
            key = normalize(item.strip().strip(_QUOTES))
            if key and key not in ents:
                ents.append(key)
        known = graph.normalized_entities if graph is not None else frozenset()
        return cls(", ".join(items), tuple(ents), tuple(e in known for e in ents))


def _split_answer(text: str) -> list[str]:
    parts, buf, quoted = [], [], False
    for ch in text:
        if ch == '"':
            quoted = not quoted
        if ch in ",\n" and not quoted:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return parts


def extract_answer_set(answer_text: str, graph: KnowledgeGraph | None = None) -> AnswerSet:
    """Split on commas/newlines, strip quotes, normalize, dedupe, resolve against ``graph``."""
    result = AnswerSet.of(_split_answer(answer_text), graph)
    return replace(result, raw_text=answer_text)


# --- trajectory state --------------------------------------------------------

@dataclass(frozen=True)
class TurnRecord:
    message: str
    parsed: ParsedTurn
    observation: Observation | None = None
    wrapped: str | None = None

    def to_dict(self) -> dict:
        return {
            "message": self.message,
            "parsed": self.parsed.to_dict(),
            "observation": self.observation.to_dict() if self.observation else None,
            "wrapped": self.wrapped,
        }

    @classmethod
    def from_dict(cls, d) -> "TurnRecord":
        obs = d.get("observation")
        return cls(
            d["message"],
            ParsedTurn.from_dict(d["parsed"]) if d.get("parsed") else parse_message(d["message"]),
            Observation.from_dict(obs) if obs else None,
            d.get("wrapped"),
        )


@dataclass(frozen=True)
class TrajectoryState:
    sample_id: str
    prompt: str
    max_turns: int
    turn_index: int = 1
    records: tuple[TurnRecord, ...] = ()
    terminated: bool = False
    predicted_answers: AnswerSet | None = None
    budget_exhausted: bool = False
    context_overflow: bool = False
    infra_failed: bool = False
    rollout_index: int = 0
    gold_answers: tuple[str, ...] | None = field(default=None, compare=False)

    @property
    def context(self) -> str:
        parts = [self.prompt]
        for rec in self.records:
            parts.append(rec.message)
            if rec.wrapped is not None:
                parts.append(rec.wrapped)
        return "\n".join(parts)

    @property
    def retrieval_count(self) -> int:
        return sum(1 for r in self.records if r.observation is not None)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "rollout_index": self.rollout_index,
            "prompt": self.prompt,
            "max_turns": self.max_turns,
            "turn_index": self.turn_index,
            "turns": [r.to_dict() for r in self.records],
            "terminated": self.terminated,
            "budget_exhausted": self.budget_exhausted,
            "context_overflow": self.context_overflow,
            "infra_failed": self.infra_failed,
            "predicted_answers": self.predicted_answers.to_dict() if self.predicted_answers else None,
        }
        if self.gold_answers is not None:
            d["gold_answers"] = list(self.gold_answers)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrajectoryState":
        pred = d.get("predicted_answers")
        records = tuple(TurnRecord.from_dict(t) for t in d.get("turns", ()))
        return cls(
            sample_id=d["sample_id"],
            prompt=d.get("prompt", ""),
            max_turns=d["max_turns"],
            turn_index=d.get("turn_index", max(1, len(records))),
            records=records,
            terminated=d.get("terminated", False),
            predicted_answers=AnswerSet.from_dict(pred) if pred is not None else None,
            budget_exhausted=d.get("budget_exhausted", False),
            context_overflow=d.get("context_overflow", False),
            infra_failed=d.get("infra_failed", False),
            rollout_index=d.get("rollout_index", 0),
            gold_answers=tuple(d["gold_answers"]) if d.get("gold_answers") is not None else None,
        )


Trajectory = TrajectoryState


def start(sample_id: str, question: str, max_turns: int, **kwargs) -> TrajectoryState:
    return TrajectoryState(sample_id, build_initial_prompt(question, max_turns), max_turns, **kwargs)


def advance(
    state: TrajectoryState,
    message: str,
    executor: Executor,
    graph: KnowledgeGraph | None = None,
) -> TrajectoryState:
    """Consume one agent message and return the successor state.

    An answer terminates the episode. A retrieval is executed and its wrapped
    observation recorded. When turn ``max_turns`` ends without an answer the
    episode terminates with an empty prediction and ``budget_exhausted`` set.
    """
    if state.terminated:
        raise ProtocolError("cannot advance a terminated trajectory")
    parsed = parse_message(message)
    if parsed.is_answer:
        record = TurnRecord(message, parsed)
        return replace(
            state,
            records=state.records + (record,),
            terminated=True,
            predicted_answers=extract_answer_set(parsed.answer_text, graph),
        )
    obs = executor(parsed.action) if parsed.action is not None else None
    record = TurnRecord(message, parsed, obs, wrap_observation(obs))
    records = state.records + (record,)
    if state.turn_index >= state.max_turns:
        return replace(
            state, records=records, terminated=True, budget_exhausted=True, predicted_answers=AnswerSet()
        )
    return replace(state, records=records, turn_index=state.turn_index + 1)
