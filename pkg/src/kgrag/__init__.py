"""Schema-agnostic knowledge-graph retrieval environment with verifiable rewards and turn-level credit."""

from .actions import (
    ActionKind, ErrorKind, KGError, Observation, RetrievalAction, execute, format_relations_hierarchical,
    get_head_entities, get_head_relations, get_tail_entities, get_tail_relations,
)
from .credit import CreditConfig, TokenBatch, TurnTokens, compute_advantages, grpo_objective
from .graph import KnowledgeGraph, QASample, ReasoningPath, extract_subgraph, load_qa_dataset, load_triples
from .normalize import normalize
from .protocol import AnswerSet, TrajectoryState, advance, build_initial_prompt, parse_message, start
from .rewards import RewardBreakdown, RewardConfig, f1, hit_at_1, score_trajectory
from .rollout import OraclePolicy, RandomPolicy, RemotePolicy, collect_rollouts, run_episode

__version__ = "0.1.0"
