import pytest

from kgrag.graph import KnowledgeGraph, QASample, ReasoningPath
from kgrag.synthetic import synthetic_dataset

CHICAGO_TRIPLES = [
    ("Chicago", "location.location.containedby", "Illinois"),
    ("Illinois", "location.location.contains", "Chicago"),
    ("Illinois", "location.location.contains", "Springfield"),
    ("Springfield", "location.location.containedby", "Illinois"),
    ("Illinois", "location.administrative_division.capital", "Springfield"),
    ("Illinois", "location.location.containedby", "United States of America"),
    ("Barack Obama", "people.person.place_of_birth", "Honolulu"),
    ("Barack Obama", "people.person.places_lived", "Chicago"),
]

# Relations of a WebQSP-style entity, used for the hierarchical rendering check.
BECKHAM_RELATIONS = [
    "people.person.spouse_s",
    "people.person.nationality",
    "sports.pro_athlete.teams",
    "people.person.place_of_birth",
    "sports.pro_athlete.sports_played_professionally",
    "people.person.profession",
    "base.popstra.celebrity.dated",
    "film.actor.film",
]


@pytest.fixture
def chicago():
    return KnowledgeGraph(CHICAGO_TRIPLES)


@pytest.fixture
def chicago_sample(chicago):
    return QASample(
        sample_id="q1",
        question="What state is Chicago in?",
        anchor_entities=("Chicago",),
        gold_answers=("Illinois",),
        graph=chicago,
        gold_path=ReasoningPath(("Chicago", "Illinois"), ("location.location.containedby",)),
    )


@pytest.fixture
def beckham():
    triples = [("David Beckham", r, f"o{i}") for i, r in enumerate(BECKHAM_RELATIONS)]
    return KnowledgeGraph(triples)


@pytest.fixture(scope="session")
def synth25():
    return synthetic_dataset(25, seed=7, max_hops=3)
