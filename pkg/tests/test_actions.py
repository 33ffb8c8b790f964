import json
from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from kgrag.actions import (
    ACTION_NAMES, CATALOGUE, KGError, ErrorKind, RetrievalAction, execute, format_relations_hierarchical,
    get_head_entities, get_head_relations, get_tail_entities, get_tail_relations, parse_relations_hierarchical,
    realize_path,
)
from kgrag.graph import KnowledgeGraph, ReasoningPath

# Byte-exact texts of the eight catalogue errors, typed in independently of the data file.
GOLDEN = {
    "Invalid Action": ("KG_SERVER_ERROR", 'Action "get_entity_info" not available (use: get_head_relations, get_tail_relations, get_head_entities, get_tail_entities)'),
    "Missing Required Fields": ("KG_FORMAT_ERROR", "Missing required fields for get_tail_entities: relation_name"),
    "Wrong Argument Count": ("KG_FORMAT_ERROR", "get_tail_relations accepts only one entity argument"),
    "Sample Missing": ("KG_SAMPLE_NOT_FOUND", 'Sample "sample_12345" not found in KG'),
    "Entity Not in KG": ("KG_ENTITY_NOT_FOUND", 'Entity "Barack Obamaa" not found in KG'),
    "Invalid Relation": ("KG_RELATION_NOT_FOUND", 'Relation "location.capital" not found in KG'),
    "No Relations Found": ("KG_NO_RESULTS", 'No tail relations found for entity "Random_Entity_123" in knowledge graph'),
    "No Entities Found": ("KG_NO_RESULTS", 'No tail entities found for relation "film.director.film" with head "Barack Obama" in knowledge graph'),
}


def test_catalogue_file_matches_golden():
    assert {e["kind"]: (e["code"], e["text"]) for e in CATALOGUE["entries"]} == GOLDEN
    for e in CATALOGUE["entries"]:
        assert e["template"].format(**e["example"]) == e["text"]


def crafted_errors():
    g = KnowledgeGraph([
        ("Barack Obama", "film.director.film", "Dummy"),
        ("Dummy", "film.director.film", "Barack Obama"),
        ("Random_Entity_123", "people.person.spouse", "Dummy"),
    ])
    # Random_Entity_123 should have no outgoing edges for the tail-relations case
    g_sink = KnowledgeGraph([("Dummy", "people.person.spouse", "Random_Entity_123"),
                             ("Barack Obama", "people.person.nationality", "Dummy"),
                             ("Dummy", "film.director.film", "Dummy")])
    return {
        "Invalid Action": execute(g, RetrievalAction("get_entity_info", ("Barack Obama",))),
        "Missing Required Fields": execute(g, RetrievalAction("get_tail_entities", ("Barack Obama",))),
        "Wrong Argument Count": execute(g, RetrievalAction("get_tail_relations", ("Barack Obama", "film.director.film"))),
        "Entity Not in KG": execute(g, RetrievalAction("get_tail_relations", ("Barack Obamaa",))),
        "Invalid Relation": execute(g, RetrievalAction("get_tail_entities", ("Barack Obama", "location.capital"))),
        "No Relations Found": execute(g_sink, RetrievalAction("get_tail_relations", ("Random_Entity_123",))),
        "No Entities Found": execute(g_sink, RetrievalAction("get_tail_entities", ("Barack Obama", "film.director.film"))),
    }


@pytest.mark.parametrize("kind", [k for k in GOLDEN if k != "Sample Missing"])
def test_crafted_requests_reproduce_catalogue(kind):
    obs = crafted_errors()[kind]
    assert not obs.ok
    assert (obs.error_code, obs.text) == GOLDEN[kind]
    assert obs.error_kind == kind


def test_sample_missing_error_text():
    err = KGError(ErrorKind.SAMPLE_MISSING, sample_id="sample_12345")
    assert (err.code, err.text) == GOLDEN["Sample Missing"]


def test_flat_rendering(chicago):
    obs = execute(chicago, RetrievalAction("get_tail_relations", ("Illinois",)))
    assert obs.text == ('Tail relations for entity "Illinois": location.administrative_division.capital, '
                        "location.location.containedby, location.location.contains")
    obs = execute(chicago, RetrievalAction("get_head_relations", ("Chicago",)))
    assert obs.text == 'Head relations for entity "Chicago": location.location.contains, people.person.places_lived'
    obs = execute(chicago, RetrievalAction("get_tail_entities", ("Illinois", "location.location.contains")))
    assert obs.text == 'Tail entities for relation "location.location.contains" with head "Illinois": Chicago, Springfield'
    assert obs.labels == ("Chicago", "Springfield")
    obs = execute(chicago, RetrievalAction("get_head_entities", ("Illinois", "location.location.containedby")))
    assert obs.text == 'Head entities for relation "location.location.containedby" with tail "Illinois": Chicago, Springfield'


def test_head_entities_empty_is_error(chicago):
    obs = execute(chicago, RetrievalAction("get_head_entities", ("Honolulu", "location.location.contains")))
    assert obs.error_code == "KG_NO_RESULTS"
    assert obs.text == ('No head entities found for relation "location.location.contains" with tail "Honolulu" '
                        "in knowledge graph")


def test_function_api_argument_orders(chicago):
    assert get_tail_relations(chicago, "Chicago") == ("location.location.containedby",)
    assert get_head_relations(chicago, "Honolulu") == ("people.person.place_of_birth",)
    assert get_tail_entities(chicago, "Barack Obama", "people.person.places_lived") == ("Chicago",)
    assert get_head_entities(chicago, "people.person.places_lived", "Chicago") == ("Barack Obama",)
    with pytest.raises(KGError) as exc:
        get_tail_entities(chicago, "Nowhere", "people.person.places_lived")
    assert exc.value.code == "KG_ENTITY_NOT_FOUND"


def test_arity_errors(chicago):
    obs = execute(chicago, RetrievalAction("get_tail_entities", ()))
    assert obs.text == "Missing required fields for get_tail_entities: entity_id, relation_name"
    obs = execute(chicago, RetrievalAction("get_head_relations", ()))
    assert obs.text == "Missing required fields for get_head_relations: entity_id"
    obs = execute(chicago, RetrievalAction("get_head_entities", ("a", "b", "c")))
    assert obs.text == "get_head_entities accepts only entity and relation arguments"
    assert obs.error_code == "KG_FORMAT_ERROR"


def test_result_cap():
    g = KnowledgeGraph([("hub", "r", f"x{i:03d}") for i in range(250)])
    obs = execute(g, RetrievalAction("get_tail_entities", ("hub", "r")))
    assert obs.truncated == 50
    assert len(obs.labels) == 200
    assert obs.text.endswith("x199, …(50 more)")
    obs = execute(g, RetrievalAction("get_tail_entities", ("hub", "r")), max_results=250)
    assert obs.truncated == 0 and "more)" not in obs.text


def test_hierarchical_example_tree():
    # The six relations of a country entity, grouped into a domain / type tree.
    rels = [
        "location.country.first_level_divisions", "location.location.containedby",
        "location.location.contains", "people.person.nationality",
        "people.person.place_of_birth", "government.government.government_for",
    ]
    assert format_relations_hierarchical(rels) == (
        "government\n"
        "  government: government_for\n"
        "location\n"
        "  country: first_level_divisions\n"
        "  location: containedby, contains\n"
        "people\n"
        "  person: nationality, place_of_birth"
    )


def test_hierarchical_rendering_of_observation(beckham):
    obs = execute(beckham, RetrievalAction("get_tail_relations", ("David Beckham",)), format_mode="hierarchical")
    assert obs.text == (
        'Tail relations for entity "David Beckham":\n'
        "base\n"
        "  popstra: celebrity.dated\n"
        "film\n"
        "  actor: film\n"
        "people\n"
        "  person: nationality, place_of_birth, profession, spouse_s\n"
        "sports\n"
        "  pro_athlete: sports_played_professionally, teams"
    )
    body = obs.text.split(":\n", 1)[1]
    assert parse_relations_hierarchical(body) == set(obs.labels)
    # entity-returning actions ignore the format mode
    flat = execute(beckham, RetrievalAction("get_tail_entities", ("David Beckham", "film.actor.film")))
    hier = execute(beckham, RetrievalAction("get_tail_entities", ("David Beckham", "film.actor.film")), format_mode="hierarchical")
    assert flat == hier


def test_hierarchical_mixed_shapes():
    text = format_relations_hierarchical(["type.object.name", "common.topic", "sameAs", "label"])
    assert text == "common\n  topic\ntype\n  object: name\nlabel, sameAs"


rel_part = st.text("abcxyz_", min_size=1, max_size=4)
relation = st.one_of(
    rel_part,
    st.builds(lambda a, b: f"{a}.{b}", rel_part, rel_part),
    st.builds(lambda a, b, c: f"{a}.{b}.{c}", rel_part, rel_part, rel_part),
    st.builds(lambda a, b, c, d: f"{a}.{b}.{c}.{d}", rel_part, rel_part, rel_part, rel_part),
)


@given(st.sets(relation, min_size=1, max_size=25))
@settings(max_examples=300)
def test_hierarchical_round_trip(rels):
    assert parse_relations_hierarchical(format_relations_hierarchical(rels)) == rels


def test_unknown_format_mode(chicago):
    with pytest.raises(ValueError):
        execute(chicago, RetrievalAction("get_tail_relations", ("Chicago",)), format_mode="tree")


def test_realize_path(chicago):
    p = ReasoningPath(("Barack Obama", "Chicago", "Illinois"),
                      ("people.person.places_lived", "location.location.containedby"))
    acts = realize_path(chicago, p)
    assert [a.render() for a in acts] == [
        'get_tail_entities("Barack Obama", "people.person.places_lived")',
        'get_tail_entities("Chicago", "location.location.containedby")',
    ]
    assert "Illinois" in execute(chicago, acts[-1]).labels
    with pytest.raises(ValueError):
        realize_path(chicago, ReasoningPath(("Chicago", "Honolulu"), ("x",)))


def test_action_and_observation_serialize(chicago):
    a = RetrievalAction("get_tail_entities", ("Illinois", "location.location.contains"))
    assert RetrievalAction.from_dict(json.loads(json.dumps(a.to_dict()))) == a
    obs = execute(chicago, a)
    from kgrag.actions import Observation
    assert Observation.from_dict(json.loads(json.dumps(obs.to_dict()))) == obs
    assert set(ACTION_NAMES) == {"get_tail_relations", "get_head_relations", "get_tail_entities", "get_head_entities"}


def test_catalogue_is_packaged():
    raw = resources.files("kgrag").joinpath("data/error_catalogue.json").read_text("utf-8")
    assert json.loads(raw)["version"] == CATALOGUE["version"]
