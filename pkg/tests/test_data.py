import json
import random

import pytest

from ptkbcir import data
from ptkbcir.data import AnnotationSet, AnnotationSource, Run
from ptkbcir.errors import ParseError, ValidationError


def test_turn_ids_sort_numerically():
    ids = ["10-1-2", "2-1-10", "2-1-9", "2-1-1"]
    assert sorted(ids, key=data.turn_sort_key) == ["2-1-1", "2-1-9", "2-1-10", "10-1-2"]
    with pytest.raises(ValueError):
        data.split_turn_id("2-1")


def small_topics():
    return [
        {
            "number": "9-1",
            "title": "t",
            "ptkb": {"1": "a", "2": "b", "3": "c"},
            "turns": [
                {"turn_id": 1, "utterance": "q1", "resolved_utterance": "r1", "response": "a1", "ptkb_provenance": [2]},
                {"turn_id": 2, "utterance": "q2", "resolved_utterance": "r2", "response": "", "ptkb_provenance": []},
            ],
        }
    ]


def test_parse_topics_small_fixture():
    (conv,) = data.parse_topics(json.dumps(small_topics()))
    assert conv.conversation_id == "9-1"
    assert len(conv.ptkb) == 3
    assert [t.turn_id for t in conv.turns] == ["9-1-1", "9-1-2"]
    assert conv.turns[0].human_ptkb_keys == frozenset({"2"})
    assert conv.turns[1].human_ptkb_keys == frozenset()
    assert conv.history("9-1-2") == (conv.turns[0],)


def test_parse_topics_empty_and_errors():
    assert data.parse_topics(b"[]") == []
    bad = small_topics()
    del bad[0]["turns"][1]["utterance"]
    with pytest.raises(ParseError) as e:
        data.parse_topics(json.dumps(bad))
    assert "turns[1]" in str(e.value)
    dup = small_topics()
    dup[0]["turns"][1]["turn_id"] = 1
    with pytest.raises(ValidationError):
        data.parse_topics(json.dumps(dup))


def test_topics_round_trip():
    convs = data.parse_topics(json.dumps(small_topics()))
    assert data.parse_topics(data.dump_topics(convs)) == convs


def test_parse_qrels():
    q = data.parse_qrels(b"9-1-1 0 docA 2\n9-1-1 0 docB 0")
    assert q.judgments == {("9-1-1", "docA"): 2, ("9-1-1", "docB"): 0}
    assert len(data.parse_qrels(b"")) == 0
    with pytest.raises(ParseError) as e:
        data.parse_qrels(b"9-1-1 0 docA 2\n9-1-1 0 docB x\n")
    assert "2" in str(e.value)


def test_run_lines_and_parse():
    run = Run("tag", {"9-1-1": [("dA", 2.0), ("dB", 1.0)]})
    lines = data.write_run(run).decode().splitlines()
    assert [ln.split()[3] for ln in lines] == ["1", "2"]
    parsed = data.parse_run(b"9-1-1 Q0 dA 1 2.5 tag\n")
    assert parsed.rankings == {"9-1-1": [("dA", 2.5)]}


def test_run_round_trip_100_turns():
    rng = random.Random(3)
    rankings = {}
    for c in range(1, 101):
        scores = sorted((rng.uniform(0, 20) for _ in range(rng.randint(1, 8))), reverse=True)
        rankings[f"{c}-1-1"] = [(f"doc{c}_{i}", s) for i, s in enumerate(scores)]
    back = data.parse_run(data.write_run(Run("x", rankings)))
    assert back.rankings.keys() == rankings.keys()
    for t, ranked in rankings.items():
        assert [d for d, _ in back.rankings[t]] == [d for d, _ in ranked]
        assert all(abs(a - b) < 1e-6 for (_, a), (_, b) in zip(back.rankings[t], ranked))


def test_run_rejects_bad_ranks():
    with pytest.raises(ValidationError):
        data.parse_run(b"9-1-1 Q0 dA 2 2.5 tag\n")


def test_annotations_round_trip(mini_dir):
    convs = data.parse_topics((mini_dir / "topics.json").read_bytes())
    ann = AnnotationSet(AnnotationSource.HUMAN, {"1-1-1": frozenset({"1", "4"}), "1-1-2": frozenset()})
    back = data.parse_annotations(data.write_annotations(ann), convs)
    assert back.selections == ann.selections
    bad = AnnotationSet(AnnotationSource.HUMAN, {"1-1-1": frozenset({"9"})})
    with pytest.raises(ValidationError):
        bad.validate(convs)


# counts written down when the mini fixture was authored
MINI_COUNTS = dict(
    topics=2,
    conversations=2,
    turns=6,
    assessed_turns=5,
    ptkb_sentences=7,
    ptkb_assessed_turns=6,
    ptkb_assessments=21,
    relevant_ptkb=5,
)


def test_mini_fixture_stats(mini_dir):
    convs = data.parse_topics((mini_dir / "topics.json").read_bytes())
    qrels = data.parse_qrels((mini_dir / "qrels.txt").read_bytes())
    stats = data.dataset_stats(convs, qrels)
    for field, value in MINI_COUNTS.items():
        assert getattr(stats, field) == value, field


def test_empty_stats():
    stats = data.dataset_stats([], data.Qrels({}))
    assert all(v == 0 for _, v in stats.as_rows())


def test_turn_number_field_and_order():
    topics = [
        {
            "number": "3-2",
            "title": "t",
            "ptkb": {"2": "b", "1": "a"},
            "turns": [{"number": 1, "utterance": "x"}, {"number": 2, "utterance": "y"}],
        }
    ]
    (conv,) = data.parse_topics(json.dumps(topics))
    assert [t.turn_id for t in conv.turns] == ["3-2-1", "3-2-2"]
    assert conv.ptkb.keys() == ["2", "1"]


def test_stats_survive_reserialization(mini_dir):
    convs = data.parse_topics((mini_dir / "topics.json").read_bytes())
    qrels = data.parse_qrels((mini_dir / "qrels.txt").read_bytes())
    again = data.parse_topics(data.dump_topics(convs))
    assert data.dataset_stats(again, data.parse_qrels(data.write_qrels(qrels))) == data.dataset_stats(convs, qrels)
