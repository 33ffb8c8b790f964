import pytest
from hypothesis import given, settings, strategies as st

from helpers import corpus, oracle_rewards
from kgrag.protocol import AnswerSet, advance, parse_message, start
from kgrag.rewards import (
    RewardBreakdown, RewardConfig, f1, hit_at_1, retrieval_coverage, score_answer_format, score_trajectory,
)
from kgrag.rollout import local_executor


def test_defaults():
    c = RewardConfig()
    assert (c.w_fmt, c.w_kg, c.w_ans, c.w_F1, c.w_ret) == (0.5, 0.5, 0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        RewardConfig.from_mapping({"w_bogus": 1})
    with pytest.raises(ValueError):
        RewardConfig(w_kg=-1)


@pytest.mark.parametrize("pred,gold,expected", [
    (["a"], ["a"], 1.0),
    (["a", "b"], ["a"], 2 * 0.5 * 1 / 1.5),
    (["a"], ["a", "b", "c"], 2 * 1 * (1 / 3) / (1 + 1 / 3)),
    ([], ["a"], 0.0),
    (["x"], ["a"], 0.0),
    (["A."], ["a"], 1.0),
])
def test_f1_hand_values(pred, gold, expected):
    assert f1(pred, gold) == pytest.approx(expected, abs=1e-15)


def test_f1_empty_gold_rejected():
    with pytest.raises(ValueError):
        f1(["a"], [])


def test_hit_at_1_variants():
    assert hit_at_1(["x", "a"], ["a"]) == 1
    assert hit_at_1(["x", "a"], ["a"], strict=True) == 0
    assert hit_at_1(["a", "x"], ["a"], strict=True) == 1
    assert hit_at_1(AnswerSet(), ["a"]) == 0


@given(st.sets(st.sampled_from("abcdef"), max_size=6), st.sets(st.sampled_from("abcdef"), min_size=1, max_size=6))
def test_f1_bounds_and_symmetry(p, g):
    v = f1(p, g)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (p == g)
    if p:
        assert v == pytest.approx(f1(g, p))


def test_answer_format_only_on_terminal_turn():
    t = parse_message("<think>x</think><answer>Illinois</answer>")
    assert score_answer_format(t, True) == 1
    assert score_answer_format(t, False) == 0
    assert score_answer_format(parse_message("<think>x</think><answer> , </answer>"), True) == 0
    assert score_answer_format(parse_message("<answer>Illinois</answer>"), True) == 0


def test_hand_trajectory(chicago):
    ex = local_executor(chicago)
    s = start("q1", "What state is Chicago in", 5)
    s = advance(s, '<think>a</think><kg-query>get_tail_relations("Chicago")</kg-query>', ex)
    s = advance(s, '<think>b</think><kg-query>get_tail_entities("Chicago", "nope")</kg-query>', ex)
    s = advance(s, '<think>c</think><kg-query>get_tail_entities("Chicago", "location.location.containedby")</kg-query>', ex)
    s = advance(s, "<think>d</think><answer>Illinois, Ohio</answer>", ex, chicago)
    b = score_trajectory(s, ["Illinois"])
    assert b.r_turn == (1.0, 0.5, 1.0, 1.0)
    assert b.f1 == pytest.approx(2 / 3)
    assert b.v_ret == 1
    assert b.r_global == pytest.approx(2 / 3 + 1)
    assert b.hit_at_1 == 1
    assert RewardBreakdown.from_dict(b.to_dict()) == b


def test_unterminated_trajectory_rejected(chicago):
    with pytest.raises(ValueError):
        score_trajectory(start("q", "q", 3), ["a"])


def test_matches_oracle_on_corpus():
    for traj, gold in corpus(1, 200):
        b = score_trajectory(traj, gold)
        r_turn, f, v_ret, r_global = oracle_rewards(traj, gold)
        assert max(abs(x - y) for x, y in zip(b.r_turn, r_turn)) <= 1e-12
        assert abs(b.f1 - f) <= 1e-12 and b.v_ret == v_ret and abs(b.r_global - r_global) <= 1e-12
        assert retrieval_coverage(traj, gold) == v_ret


def test_custom_weights_match_oracle():
    cfg = RewardConfig(w_fmt=0.3, w_kg=0.7, w_ans=0.2, w_F1=2.0, w_ret=0.25)
    for traj, gold in corpus(2, 100):
        b = score_trajectory(traj, gold, cfg)
        r_turn, _, _, r_global = oracle_rewards(traj, gold, 0.3, 0.7, 0.2, 2.0, 0.25)
        assert list(b.r_turn) == pytest.approx(r_turn, abs=1e-12)
        assert b.r_global == pytest.approx(r_global, abs=1e-12)
