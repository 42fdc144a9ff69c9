"""Human, LLM and retrieval-impact PTKB annotations, and how they overlap."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass

from .data import AnnotationSet, AnnotationSource, Conversation, ConversationTurn, Ptkb, turn_sort_key
from .errors import ParseFailure, Unassessed
from .llm import REASK_MESSAGE, ChatClient, ChatRequest, TemplateLibrary, extract_fields, render_prompt
from .reformulation import filter_keys, format_history, format_ptkb, parse_key_list

logger = logging.getLogger(__name__)

IMPROVEMENT_EPSILON = 1e-9


def ingest_human(conversations: Iterable[Conversation]) -> AnnotationSet:
    """Each turn's human provenance labels, empty where none were given."""
    conversations = list(conversations)
    selections = {t.turn_id: t.human_ptkb_keys for c in conversations for t in c.turns}
    annotations = AnnotationSet(AnnotationSource.HUMAN, selections)
    annotations.validate(conversations)
    return annotations


# --------------------------------------------------------------------------
# LLM


def _parse_selection(text: str) -> list[str]:
    try:
        return parse_key_list(extract_fields(text, ["ptkb_selection"])["ptkb_selection"])
    except ParseFailure:
        return parse_key_list(text.strip().strip("`").strip())


def llm_annotate(
    client: ChatClient,
    turn: ConversationTurn,
    history: Sequence[ConversationTurn],
    ptkb: Ptkb,
    templates: TemplateLibrary | None = None,
    retry_budget: int = 1,
    include_responses: bool = True,
) -> tuple[frozenset[str], tuple[str, ...]]:
    """Ask the model which PTKB sentences matter for ``turn``.

    Returns the selected keys and diagnostic flags. Keys the PTKB does not
    contain are dropped (flag ``unknown_keys``); an answer that stays
    unparseable after ``retry_budget`` follow-ups yields an empty selection
    flagged ``parse_failure``.
    """
    templates = templates or TemplateLibrary()
    prompt = render_prompt(
        templates.get("annotate_llm").compose(),
        {"ptkb": format_ptkb(ptkb), "history": format_history(history, include_responses), "utterance": turn.utterance},
    )
    request = client.request(prompt)
    messages = list(request.messages)
    text = client.chat(request)
    for attempt in range(retry_budget + 1):
        try:
            keys = _parse_selection(text)
            break
        except ParseFailure:
            if attempt == retry_budget:
                logger.warning("turn %s: LLM selection unparseable, recording empty selection", turn.turn_id)
                return frozenset(), ("parse_failure",)
            messages += [("assistant", text), ("user", REASK_MESSAGE.format(fields="ptkb_selection"))]
            text = client.chat(ChatRequest(client.model, tuple(messages), client.temperature, client.max_tokens))
    selected, unknown = filter_keys(keys, ptkb)
    if unknown:
        logger.warning("turn %s: dropping unknown PTKB keys %s", turn.turn_id, unknown)
        return selected, ("unknown_keys",)
    return selected, ()


# --------------------------------------------------------------------------
# retrieval impact


@dataclass(frozen=True)
class ImpactRecord:
    turn_id: str
    # None marks the baseline-only record of a turn whose PTKB is empty
    ptkb_key: str | None
    baseline_metric: float
    with_sentence_metric: float
    improved: bool


def automatic_annotate(
    turn: ConversationTurn,
    ptkb: Ptkb,
    query_for: Callable[[Ptkb], str],
    search: Callable[[str], Sequence[str]],
    qrels_for_turn: Mapping[str, int],
    metric: Callable[[Sequence[str], Mapping[str, int]], float],
    epsilon: float = IMPROVEMENT_EPSILON,
) -> tuple[frozenset[str], list[ImpactRecord]]:
    """Select the sentences whose inclusion alone raises ``metric``.

    ``query_for(subset)`` reformulates the turn with only ``subset`` of the
    PTKB and returns the search string; ``search`` returns ranked doc ids.
    The empty subset gives the baseline; each sentence is then tried on its
    own and kept when its score beats the baseline by more than ``epsilon``.
    """
    if not qrels_for_turn:
        raise Unassessed(turn.turn_id)
    baseline = metric(search(query_for(Ptkb())), qrels_for_turn)
    if not len(ptkb):
        return frozenset(), [ImpactRecord(turn.turn_id, None, baseline, baseline, False)]
    records = []
    for sentence in ptkb:
        score = metric(search(query_for(Ptkb((sentence,)))), qrels_for_turn)
        records.append(ImpactRecord(turn.turn_id, sentence.key, baseline, score, score > baseline + epsilon))
    return frozenset(r.ptkb_key for r in records if r.improved), records


def write_impact_audit(records: Iterable[ImpactRecord]) -> bytes:
    lines = ["turn_id\tptkb_key\tbaseline\twith_sentence\timproved\n"]
    for r in sorted(records, key=lambda r: (turn_sort_key(r.turn_id), r.ptkb_key is not None, _k(r.ptkb_key))):
        key = "-" if r.ptkb_key is None else r.ptkb_key
        lines.append(f"{r.turn_id}\t{key}\t{r.baseline_metric:.6f}\t{r.with_sentence_metric:.6f}\t{int(r.improved)}\n")
    return "".join(lines).encode("utf-8")


def parse_impact_audit(document: bytes | str) -> list[ImpactRecord]:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    records = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        turn_id, key, base, with_s, improved = line.split("\t")
        records.append(ImpactRecord(turn_id, None if key == "-" else key, float(base), float(with_s), improved == "1"))
    return records


def _k(key: str | None):
    if key is None:
        return (0, 0, "")
    return (0, int(key), "") if key.isdigit() else (1, 0, key)


# --------------------------------------------------------------------------
# overlap


@dataclass(frozen=True)
class OverlapReport:
    source_a: str
    source_b: str
    total_turns: int
    exact_match_turns: int
    # (turn, key) pairs selected by both / by either
    agreed_pairs: frozenset[tuple[str, str]]
    union_pairs: int
    selected_pairs_a: int
    selected_pairs_b: int
    no_ptkb_turns_a: int
    no_ptkb_turns_b: int
    no_ptkb_turns_both: int
    # sentence-level agreement (both selected or both not) over every PTKB sentence of every turn
    sentence_agreement: int | None = None
    sentence_total: int | None = None

    @property
    def exact_match_rate(self) -> float:
        return self.exact_match_turns / self.total_turns if self.total_turns else 1.0

    def rows(self) -> list[tuple[str, object]]:
        return [
            ("pair", f"{self.source_a}-{self.source_b}"),
            ("total_turns", self.total_turns),
            ("exact_match_turns", self.exact_match_turns),
            ("agreed_pairs", len(self.agreed_pairs)),
            ("union_pairs", self.union_pairs),
            (f"selected_pairs_{self.source_a}", self.selected_pairs_a),
            (f"selected_pairs_{self.source_b}", self.selected_pairs_b),
            (f"no_ptkb_turns_{self.source_a}", self.no_ptkb_turns_a),
            (f"no_ptkb_turns_{self.source_b}", self.no_ptkb_turns_b),
            ("no_ptkb_turns_both", self.no_ptkb_turns_both),
            ("sentence_agreement", self.sentence_agreement),
            ("sentence_total", self.sentence_total),
        ]


def overlap_stats(
    a: AnnotationSet,
    b: AnnotationSet,
    turns: Iterable[str],
    ptkbs: Mapping[str, Ptkb] | None = None,
) -> OverlapReport:
    """Compare two annotation sets over ``turns``; a missing turn counts as an empty selection.

    With ``ptkbs`` (turn id to PTKB) the report also counts sentence-level
    agreement over all sentences, selected or not.
    """
    turns = list(dict.fromkeys(turns))
    exact = no_a = no_b = no_both = sel_a = sel_b = union = 0
    agreed: set[tuple[str, str]] = set()
    sent_agree = sent_total = 0
    for t in turns:
        sa, sb = a.selection(t), b.selection(t)
        exact += sa == sb
        no_a += not sa
        no_b += not sb
        no_both += not sa and not sb
        sel_a += len(sa)
        sel_b += len(sb)
        union += len(sa | sb)
        agreed.update((t, k) for k in sa & sb)
        if ptkbs is not None and t in ptkbs:
            for key in ptkbs[t].keys():
                sent_total += 1
                sent_agree += (key in sa) == (key in sb)
    return OverlapReport(
        source_a=a.source.value,
        source_b=b.source.value,
        total_turns=len(turns),
        exact_match_turns=exact,
        agreed_pairs=frozenset(agreed),
        union_pairs=union,
        selected_pairs_a=sel_a,
        selected_pairs_b=sel_b,
        no_ptkb_turns_a=no_a,
        no_ptkb_turns_b=no_b,
        no_ptkb_turns_both=no_both,
        sentence_agreement=sent_agree if ptkbs is not None else None,
        sentence_total=sent_total if ptkbs is not None else None,
    )


def needs_ptkb_subset(automatic: AnnotationSet, assessed_turns: Iterable[str]) -> set[str]:
    """Assessed turns where at least one sentence improved retrieval."""
    return {t for t in assessed_turns if automatic.selection(t)}
