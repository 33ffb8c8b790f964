"""Turn returns, pooled group-relative advantages and the clipped surrogate objective.

Everything here is plain numpy over float64. Reductions run in a fixed order
(rollout, turn, token) so results are bit-stable for identical inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .rewards import RewardBreakdown


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class CreditConfig:
    lam: float = 1.0
    epsilon_stability: float = 1e-6
    clip_epsilon: float = 0.2
    beta_kl: float = 0.01
    trajectory_level: bool = False
    normalize: str = "sum"  # or "token"

    def __post_init__(self):
        for name in ("lam", "epsilon_stability", "clip_epsilon", "beta_kl"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.lam < 0 or self.beta_kl < 0:
            raise ValueError("lam and beta_kl must be non-negative")
        if self.epsilon_stability <= 0:
            raise ValueError("epsilon_stability must be positive")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.normalize not in ("sum", "token"):
            raise ValueError("normalize must be 'sum' or 'token'")

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "CreditConfig":
        m = dict(m or {})
        if "lambda" in m:
            m["lam"] = m.pop("lambda")
        unknown = set(m) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown credit settings: {sorted(unknown)}")
        return cls(**m)

    def to_dict(self) -> dict:
        return asdict(self)


def turn_returns(breakdowns: Sequence[RewardBreakdown | None], lam: float = 1.0) -> list[np.ndarray | None]:
    """G_t = r_turn_t + lam * R_global for every turn; None entries pass through."""
    out = []
    for b in breakdowns:
        if b is None:
            out.append(None)
            continue
        out.append(np.asarray(b.r_turn, dtype=np.float64) + lam * b.r_global)
    return out


def trajectory_returns(breakdowns: Sequence[RewardBreakdown | None]) -> list[float | None]:
    """Per-rollout G = mean_t r_turn_t + R_global (trajectory-level credit)."""
    out: list[float | None] = []
    for b in breakdowns:
        if b is None:
            out.append(None)
        else:
            mean_turn = float(np.mean(b.r_turn)) if b.turns else 0.0
            out.append(mean_turn + b.r_global)
    return out


@dataclass
class AdvantageTable:
    returns: list[np.ndarray | None]
    advantages: list[np.ndarray | None]
    mean: float
    std: float
    count: int

    def turn_advantage(self, rollout: int, turn: int) -> float:
        adv = self.advantages[rollout]
        if adv is None:
            raise KeyError(f"rollout {rollout} is excluded")
        return float(adv[turn])

    def to_dict(self) -> dict:
        return {
            "returns": [None if r is None else r.tolist() for r in self.returns],
            "advantages": [None if a is None else a.tolist() for a in self.advantages],
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
        }


def group_advantages(returns: Sequence[np.ndarray | Sequence[float] | None], epsilon_stability: float = 1e-6) -> AdvantageTable:
    """A = (G - mean) / (std + eps), mean and population std pooled over every turn.

    ``None`` entries (failed rollouts) are excluded from the pool and stay None.
    """
    arrays = [None if r is None else np.asarray(r, dtype=np.float64) for r in returns]
    pooled = [a for a in arrays if a is not None]
    if not pooled or sum(a.size for a in pooled) == 0:
        raise ValueError("group has no turns")
    flat = np.concatenate(pooled)
    mean = float(np.mean(flat))
    std = float(np.sqrt(np.mean((flat - mean) ** 2)))
    advs = [None if a is None else (a - mean) / (std + epsilon_stability) for a in arrays]
    return AdvantageTable(arrays, advs, mean, std, int(flat.size))


def compute_advantages(breakdowns: Sequence[RewardBreakdown | None], cfg: CreditConfig = CreditConfig()) -> AdvantageTable:
    """Turn-level advantages, or trajectory-level ones broadcast to every turn."""
    if not cfg.trajectory_level:
        return group_advantages(turn_returns(breakdowns, cfg.lam), cfg.epsilon_stability)
    traj = trajectory_returns(breakdowns)
    table = group_advantages([None if g is None else [g] for g in traj], cfg.epsilon_stability)
    table.returns = [
        None if b is None else np.full(len(b.turns), traj[i]) for i, b in enumerate(breakdowns)
    ]
    table.advantages = [
        None if b is None else np.full(len(b.turns), table.advantages[i][0]) for i, b in enumerate(breakdowns)
    ]
    return table


# --- token level ---------------------------------------------------------------

@dataclass(frozen=True)
class TurnTokens:
    logp_current: np.ndarray
    logp_behavior: np.ndarray
    logp_reference: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        for name in ("logp_current", "logp_behavior", "logp_reference"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.float64))
        n = self.logp_current.shape
        if not (self.logp_behavior.shape == n == self.logp_reference.shape == self.mask.shape) or len(n) != 1:
            raise ValueError("log-prob sequences and mask must be aligned 1-d arrays")


@dataclass
class TokenBatch:
    """Flattened per-token log-probs in (rollout, turn, token) order."""

    logp_current: np.ndarray
    logp_behavior: np.ndarray
    logp_reference: np.ndarray
    mask: np.ndarray
    rollout_index: np.ndarray
    turn_index: np.ndarray
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        shapes = {a.shape for a in (self.logp_current, self.logp_behavior, self.logp_reference,
                                    self.mask, self.rollout_index, self.turn_index)}
        if len(shapes) != 1:
            raise ValueError("TokenBatch arrays must share one shape")

    def __len__(self) -> int:
        return int(self.mask.size)

    @classmethod
    def from_turns(cls, rollouts: Sequence[Sequence[TurnTokens] | None]) -> "TokenBatch":
        cols: dict[str, list] = {k: [] for k in ("lc", "lb", "lr", "m", "n", "t")}
        for n, turns in enumerate(rollouts):
            for t, tt in enumerate(turns or ()):
                size = tt.mask.size
                cols["lc"].append(tt.logp_current)
                cols["lb"].append(tt.logp_behavior)
                cols["lr"].append(tt.logp_reference)
                cols["m"].append(tt.mask)
                cols["n"].append(np.full(size, n, dtype=np.int64))
                cols["t"].append(np.full(size, t, dtype=np.int64))

        def cat(key, dtype):
            return np.concatenate(cols[key]).astype(dtype) if cols[key] else np.zeros(0, dtype=dtype)

        return cls(
            cat("lc", np.float64), cat("lb", np.float64), cat("lr", np.float64), cat("m", np.float64),
            cat("n", np.int64), cat("t", np.int64),
        )

    def turn_keys(self) -> set[tuple[int, int]]:
        return set(zip(self.rollout_index.tolist(), self.turn_index.tolist()))


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NonFiniteError(f"non-finite {name} at token {int(bad[0])}")


def broadcast_to_tokens(table: AdvantageTable, batch: TokenBatch) -> np.ndarray:
    """Per-token advantage: the turn's advantage on generated tokens, 0 on masked ones."""
    expected = {
        (n, t)
        for n, adv in enumerate(table.advantages)
        if adv is not None
        for t in range(adv.size)
    }
    got = batch.turn_keys()
    if got != expected:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise ValueError(f"advantage table and token batch are misaligned (missing={missing}, extra={extra})")
    out = np.zeros(len(batch), dtype=np.float64)
    for i, (n, t) in enumerate(zip(batch.rollout_index.tolist(), batch.turn_index.tolist())):
        out[i] = table.advantages[n][t]
    return out * batch.mask


def importance_ratios(batch: TokenBatch) -> np.ndarray:
    _check_finite("logp_current", batch.logp_current)
    _check_finite("logp_behavior", batch.logp_behavior)
    with np.errstate(over="ignore"):
        ratios = np.exp(batch.logp_current - batch.logp_behavior)
    _check_finite("importance ratio", ratios)
    return ratios


def kl_k3(batch: TokenBatch) -> np.ndarray:
    """K3 estimator exp(d) - d - 1 with d = logp_reference - logp_current."""
    _check_finite("logp_current", batch.logp_current)
    _check_finite("logp_reference", batch.logp_reference)
    d = batch.logp_reference - batch.logp_current
    with np.errstate(over="ignore", invalid="ignore"):
        kl = np.expm1(d) - d
    _check_finite("kl", kl)
    return np.maximum(kl, 0.0)


@dataclass
class ObjectiveResult:
    value: float
    terms: np.ndarray
    ratios: np.ndarray
    kl: np.ndarray
    n_tokens: int

    def to_dict(self) -> dict:
        return {"value": self.value, "n_tokens": self.n_tokens, "terms": self.terms.tolist()}


def _surrogate(ratios, adv, eps):
    clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps)
    return np.minimum(ratios * adv, clipped * adv)


def grpo_objective(batch: TokenBatch, advantages: np.ndarray, cfg: CreditConfig = CreditConfig()) -> ObjectiveResult:
    """Sum over generated tokens of min(rho*A, clip(rho)*A) - beta*KL."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.shape != batch.mask.shape:
        raise ValueError("advantages and token batch differ in shape")
    _check_finite("advantage", advantages)
    ratios = importance_ratios(batch)
    kl = kl_k3(batch)
    terms = (_surrogate(ratios, advantages, cfg.clip_epsilon) - cfg.beta_kl * kl) * batch.mask
    _check_finite("objective term", terms)
    n_tokens = int(batch.mask.sum())
    value = float(np.sum(terms))
    if cfg.normalize == "token" and n_tokens:
        value /= n_tokens
    return ObjectiveResult(value, terms, ratios, kl, n_tokens)


def objective_gradient(batch: TokenBatch, advantages: np.ndarray, cfg: CreditConfig = CreditConfig()) -> np.ndarray:
    """Analytic d objective / d logp_current, per token."""
    advantages = np.asarray(advantages, dtype=np.float64)
    ratios = importance_ratios(batch)
    eps = cfg.clip_epsilon
    unclipped = ratios * advantages
    clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps) * advantages
    inside = (ratios >= 1.0 - eps) & (ratios <= 1.0 + eps)
    surrogate_grad = np.where((unclipped <= clipped) | inside, unclipped, 0.0)
    d = batch.logp_reference - batch.logp_current
    kl_grad = 1.0 - np.exp(d)
    grad = (surrogate_grad - cfg.beta_kl * kl_grad) * batch.mask
    if cfg.normalize == "token":
        n = batch.mask.sum()
        if n:
            grad = grad / n
    return grad
