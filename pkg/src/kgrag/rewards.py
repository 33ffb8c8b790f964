"""Verifiable turn rewards and trajectory-level rewards."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping

from .actions import Observation
from .normalize import normalize
from .protocol import AnswerSet, ParsedTurn, TrajectoryState, extract_answer_set


@dataclass(frozen=True)
class RewardConfig:
    w_fmt: float = 0.5
    w_kg: float = 0.5
    w_ans: float = 0.5
    w_F1: float = 1.0
    w_ret: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "RewardConfig":
        m = dict(m or {})
        unknown = set(m) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown reward weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in m.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TurnScore:
    v_fmt: int
    v_kg: int
    v_ans: int
    r_turn: float


@dataclass(frozen=True)
class RewardBreakdown:
    turns: tuple[TurnScore, ...]
    f1: float
    v_ret: int
    r_global: float
    hit_at_1: int = 0

    @property
    def r_turn(self) -> tuple[float, ...]:
        return tuple(t.r_turn for t in self.turns)

    def to_dict(self) -> dict:
        return {
            "turns": [asdict(t) for t in self.turns],
            "f1": self.f1,
            "v_ret": self.v_ret,
            "r_global": self.r_global,
            "hit_at_1": self.hit_at_1,
        }

    @classmethod
    def from_dict(cls, d) -> "RewardBreakdown":
        return cls(
            tuple(TurnScore(**t) for t in d["turns"]),
            d["f1"], d["v_ret"], d["r_global"], d.get("hit_at_1", 0),
        )


def _gold_set(gold: Iterable[str]) -> frozenset[str]:
    keys = frozenset(k for k in (normalize(g) for g in gold) if k)
    if not keys:
        raise ValueError("gold answer set must be non-empty")
    return keys


def _pred_set(predicted: AnswerSet | Iterable[str] | None) -> frozenset[str]:
    if predicted is None:
        return frozenset()
    return frozenset(k for k in (normalize(p) for p in predicted) if k)


def score_format(turn: ParsedTurn) -> int:
    return int(turn.format_valid)


def score_kg(turn: ParsedTurn, obs: Observation | None) -> int:
    return int(turn.is_retrieval and obs is not None and obs.ok)


def score_answer_format(final_turn: ParsedTurn, is_terminal: bool = True) -> int:
    if not is_terminal or not final_turn.is_answer or not final_turn.format_valid:
        return 0
    return int(len(extract_answer_set(final_turn.answer_text)) > 0)


def f1(predicted, gold: Iterable[str]) -> float:
    """Set F1 on normalized strings; 0 for an empty prediction."""
    gold_keys = _gold_set(gold)
    pred = _pred_set(predicted)
    if not pred:
        return 0.0
    hits = len(pred & gold_keys)
    if hits == 0:
        return 0.0
    precision = hits / len(pred)
    recall = hits / len(gold_keys)
    return 2 * precision * recall / (precision + recall)


def hit_at_1(predicted, gold: Iterable[str], strict: bool = False) -> int:
    """1 if the prediction intersects gold; ``strict`` looks at the first entity only."""
    gold_keys = _gold_set(gold)
    if strict:
        first = next((k for k in (normalize(p) for p in (predicted or ())) if k), None)
        return int(first in gold_keys)
    return int(bool(_pred_set(predicted) & gold_keys))


def retrieval_coverage(traj: TrajectoryState, gold: Iterable[str]) -> int:
    """1 if a gold entity is among the labels of any successful observation."""
    gold_keys = _gold_set(gold)
    for rec in traj.records:
        obs = rec.observation
        if obs is not None and obs.ok and any(normalize(lbl) in gold_keys for lbl in obs.labels):
            return 1
    return 0


def score_trajectory(traj: TrajectoryState, gold: Iterable[str], cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    if not traj.terminated:
        raise ValueError("trajectory is not terminated")
    gold = tuple(gold)
    last = len(traj.records) - 1
    turns = []
    for i, rec in enumerate(traj.records):
        v_fmt = score_format(rec.parsed)
        v_kg = score_kg(rec.parsed, rec.observation)
        v_ans = score_answer_format(rec.parsed, is_terminal=(i == last and not traj.budget_exhausted))
        turns.append(TurnScore(v_fmt, v_kg, v_ans, cfg.w_fmt * v_fmt + cfg.w_kg * v_kg + cfg.w_ans * v_ans))
    f = f1(traj.predicted_answers, gold)
    v_ret = retrieval_coverage(traj, gold)
    return RewardBreakdown(
        turns=tuple(turns),
        f1=f,
        v_ret=v_ret,
        r_global=cfg.w_F1 * f + cfg.w_ret * v_ret,
        hit_at_1=hit_at_1(traj.predicted_answers, gold),
    )
