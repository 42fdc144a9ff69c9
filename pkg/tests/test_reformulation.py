import json

import pytest

from ptkbcir import data
from ptkbcir.data import AnnotationSet, AnnotationSource, ConversationTurn, Ptkb
from ptkbcir.errors import ParseFailure, ValidationError
from ptkbcir.llm import ChatClient
from ptkbcir.reformulation import (
    ReformulatedQuery,
    Reformulator,
    RetrieverKind,
    Strategy,
    assemble_search_query,
    build_demonstrations,
    parse_key_list,
    parse_reformulations,
    write_reformulations,
)
from mock_services import MockChat

DEMO_MARK = "### Example "


def rq(rewrite, response=""):
    return ReformulatedQuery("1-1-1", rewrite, response, Strategy.NONE, 0)


def test_query_form():
    assert assemble_search_query(rq("a", "b"), RetrieverKind.SPARSE) == "a b"
    assert assemble_search_query(rq("a", "b"), RetrieverKind.DENSE) == "a"
    assert assemble_search_query(rq("a", ""), "sparse") == "a"


def test_key_lists():
    assert parse_key_list("none") == []
    assert parse_key_list("1, 3") == ["1", "3"]
    assert parse_key_list([2, "5"]) == ["2", "5"]
    with pytest.raises(ParseFailure):
        parse_key_list("the first one")


def test_reformulation_file_round_trip():
    items = [
        ReformulatedQuery("1-1-1", "r", "a", Strategy.SAR, 3, frozenset({"2"}), ("unknown_keys",)),
        ReformulatedQuery("1-1-2", "r2", "", Strategy.HUMAN, 0, frozenset(), ()),
    ]
    assert parse_reformulations(write_reformulations(items)) == items


def ten_turn_pool():
    turns = [
        {"turn_id": i, "utterance": f"question {i}", "resolved_utterance": f"full question {i}"} for i in range(1, 11)
    ]
    convs = data.parse_topics(json.dumps([{"number": "5-1", "title": "t", "ptkb": {"1": "s"}, "turns": turns}]))
    ann = AnnotationSet(AnnotationSource.AUTOMATIC, {f"5-1-{i}": frozenset({"1"} if i % 2 else ()) for i in range(1, 11)})
    return convs, ann


def test_demonstrations_golden_and_deterministic():
    convs, ann = ten_turn_pool()
    assert build_demonstrations(convs, ann, 0, 7) == []
    demos = build_demonstrations(convs, ann, 3, 7)
    assert [d.turn_id for d in demos] == ["5-1-6", "5-1-3", "5-1-7"]
    assert demos == build_demonstrations(convs, ann, 3, 7)
    assert demos[0].gold_rewrite == "full question 6"
    assert demos[1].selected_keys == frozenset({"1"})
    with pytest.raises(ValidationError):
        build_demonstrations(convs, ann, 11, 7)


def setup(tmp_path, mock):
    client = ChatClient("http://c.test", "m", cache_path=tmp_path / "c.jsonl", transport=mock.transport, backoff=0)
    return Reformulator(client)


TURN = ConversationTurn("1-1-2", "and for dessert?", "", "", frozenset(), False)
HISTORY = (ConversationTurn("1-1-1", "what is for dinner?", "", "Pasta.", frozenset(), False),)
PTKB = Ptkb.from_mapping({"1": "I am vegetarian.", "2": "I live in Montreal.", "3": "I like jazz."})


def test_selected_pass_through(tmp_path):
    echo = MockChat(responder=lambda p: json.dumps({"rewrite": p.rsplit("Current question: ", 1)[1].split("\n")[0], "response": ""}))
    out = setup(tmp_path, echo).reformulate_selected(TURN, HISTORY, Ptkb())
    assert out.rewrite == "and for dessert?"
    assert "I am vegetarian." not in echo.prompts[0]


def test_selected_subset_in_prompt_once(tmp_path):
    mock = MockChat(responder=lambda p: '{"rewrite": "R", "response": "A"}')
    out = setup(tmp_path, mock).reformulate_selected(TURN, HISTORY, PTKB.subset(["1"]), strategy=Strategy.HUMAN)
    assert (out.rewrite, out.response) == ("R", "A")
    assert mock.prompts[0].count("I am vegetarian.") == 1
    assert "I live in Montreal." not in mock.prompts[0]
    # history: prior query, and its response because the dataset has one
    assert "Q1: what is for dinner?" in mock.prompts[0] and "A1: Pasta." in mock.prompts[0]


def test_full_ptkb_sent_verbatim(tmp_path):
    big = Ptkb.from_mapping({str(i): f"Fact number {i} about me." for i in range(1, 51)})
    mock = MockChat(responder=lambda p: '{"ptkb_selection": "none", "rewrite": "R", "response": "A"}')
    r = setup(tmp_path, mock)
    r.reformulate_selected(TURN, HISTORY, big)
    r.sar_reformulate(TURN, HISTORY, big)
    for prompt in mock.prompts:
        assert all(f"{i}. Fact number {i} about me." in prompt for i in range(1, 51))


def test_str_two_stages(tmp_path):
    mock = MockChat(script=['{"response": "H"}', '{"rewrite": "R"}'])
    out = setup(tmp_path, mock).str_reformulate(TURN, HISTORY, PTKB)
    assert (out.rewrite, out.response) == ("R", "H")
    assert len(mock.prompts) == 2
    assert "H" in mock.prompts[1].split("Current question:")[1] or "Draft response: H" in mock.prompts[1]


def test_str_stage1_failure_falls_back(tmp_path):
    mock = MockChat(script=["junk", "junk", '{"rewrite": "R", "response": "A"}'])
    out = setup(tmp_path, mock).str_reformulate(TURN, HISTORY, PTKB)
    assert out.rewrite == "R" and "str_stage1_fallback" in out.flags


def test_sar_single_call(tmp_path):
    mock = MockChat(script=['{"ptkb_selection": "2", "rewrite": "R", "response": "A"}'])
    out = setup(tmp_path, mock).sar_reformulate(TURN, HISTORY, PTKB)
    assert out.selected_keys == frozenset({"2"}) and len(mock.prompts) == 1


def test_sar_none_and_unknown(tmp_path):
    mock = MockChat(
        script=[
            '{"ptkb_selection": "none", "rewrite": "R", "response": ""}',
            '{"ptkb_selection": "1,9", "rewrite": "R", "response": ""}',
        ]
    )
    r = setup(tmp_path, mock)
    assert r.sar_reformulate(TURN, HISTORY, PTKB).selected_keys == frozenset()
    out = r.sar_reformulate(TURN, (), PTKB)
    assert out.selected_keys == frozenset({"1"}) and "unknown_keys" in out.flags


def test_failure_falls_back_to_utterance(tmp_path):
    mock = MockChat(script=["nope", "still nope"])
    out = setup(tmp_path, mock).reformulate_selected(TURN, HISTORY, PTKB)
    assert out.rewrite == TURN.utterance and "parse_failure" in out.flags
    assert assemble_search_query(out, "dense") == TURN.utterance


def test_empty_rewrite_replaced(tmp_path):
    mock = MockChat(script=['{"rewrite": "", "response": "A"}'])
    out = setup(tmp_path, mock).reformulate_selected(TURN, HISTORY, PTKB)
    assert out.rewrite == TURN.utterance and "empty_rewrite" in out.flags


@pytest.mark.parametrize("k", [0, 1, 3, 5])
def test_k_shot_sections(tmp_path, k):
    convs, ann = ten_turn_pool()
    demos = build_demonstrations(convs, ann, k, 7)
    mock = MockChat()
    r = setup(tmp_path, mock)
    r.reformulate_selected(TURN, HISTORY, PTKB, demos)
    r.sar_reformulate(TURN, HISTORY, PTKB, demos)
    r.str_reformulate(TURN, HISTORY, PTKB, demos)
    assert len(mock.prompts) == 4
    for prompt in mock.prompts:
        assert prompt.count(DEMO_MARK) == k
        # demonstrations appear in sampled order
        positions = [prompt.find(f"Current question: {d.utterance}\n") for d in demos]
        assert -1 not in positions and positions == sorted(positions)


def test_dispatch_needs_annotations(tmp_path):
    (conv,) = data.parse_topics(json.dumps([{"number": "1-1", "title": "t", "ptkb": {"1": "x"}, "turns": [{"turn_id": 1, "utterance": "u"}]}]))
    r = setup(tmp_path, MockChat())
    with pytest.raises(ValidationError):
        r.reformulate(Strategy.HUMAN, conv, conv.turns[0])
