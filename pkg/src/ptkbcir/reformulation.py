"""LLM query reformulation under the none/all/selected, STR and SAR strategies."""

from __future__ import annotations

import enum
import json
import logging
import random
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

from .data import AnnotationSet, Conversation, ConversationTurn, Ptkb, sorted_keys, turn_index, turn_sort_key
from .errors import ParseFailure, ValidationError
from .llm import ChatClient, TemplateLibrary, ask_structured, render_prompt

logger = logging.getLogger(__name__)

DEFAULT_SHOTS = (0, 1, 3, 5)


class Strategy(str, enum.Enum):
    NONE = "none"
    ALL = "all"
    HUMAN = "human"
    AUTOMATIC = "automatic"
    LLM = "llm"
    STR = "str"
    SAR = "sar"

    @property
    def annotation_source(self) -> str | None:
        return self.value if self in (Strategy.HUMAN, Strategy.AUTOMATIC, Strategy.LLM) else None


class RetrieverKind(str, enum.Enum):
    SPARSE = "sparse"
    DENSE = "dense"


@dataclass(frozen=True)
class ReformulatedQuery:
    turn_id: str
    rewrite: str
    response: str
    strategy: Strategy
    shots: int = 0
    selected_keys: frozenset[str] | None = None
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "turn_id": self.turn_id,
            "strategy": self.strategy.value,
            "shots": self.shots,
            "rewrite": self.rewrite,
            "response": self.response,
            "selected_keys": None if self.selected_keys is None else sorted_keys(self.selected_keys),
            "flags": list(self.flags),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ReformulatedQuery":
        keys = rec.get("selected_keys")
        return cls(
            turn_id=rec["turn_id"],
            rewrite=rec["rewrite"],
            response=rec.get("response", ""),
            strategy=Strategy(rec["strategy"]),
            shots=int(rec.get("shots", 0)),
            selected_keys=None if keys is None else frozenset(keys),
            flags=tuple(rec.get("flags", ())),
        )


def write_reformulations(queries: Iterable[ReformulatedQuery]) -> bytes:
    ordered = sorted(queries, key=lambda q: turn_sort_key(q.turn_id))
    return "".join(json.dumps(q.to_record(), ensure_ascii=False, sort_keys=True) + "\n" for q in ordered).encode()


def parse_reformulations(document: bytes | str) -> list[ReformulatedQuery]:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    return [ReformulatedQuery.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


def assemble_search_query(rq: ReformulatedQuery, retriever_kind: RetrieverKind | str) -> str:
    """Rewrite plus response for sparse retrieval, rewrite alone for dense."""
    kind = RetrieverKind(retriever_kind)
    if kind is RetrieverKind.DENSE:
        return rq.rewrite
    return " ".join(p for p in (rq.rewrite.strip(), rq.response.strip()) if p)


# --------------------------------------------------------------------------
# prompt inputs


def format_ptkb(ptkb: Ptkb) -> str:
    if not len(ptkb):
        return "(none)"
    return "\n".join(f"{s.key}. {s.text}" for s in ptkb)


def format_history(history: Sequence[ConversationTurn], include_responses: bool = True) -> str:
    if not history:
        return "(start of conversation)"
    lines = []
    for i, t in enumerate(history, 1):
        lines.append(f"Q{i}: {t.utterance}")
        if include_responses and t.canonical_response:
            lines.append(f"A{i}: {t.canonical_response}")
    return "\n".join(lines)


def _json_inner(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)[1:-1]


@dataclass(frozen=True)
class Demonstration:
    turn_id: str
    ptkb_text: str
    history_text: str
    utterance: str
    selected_keys: frozenset[str]
    gold_rewrite: str

    def slots(self) -> dict[str, str]:
        return {
            "demo_ptkb": self.ptkb_text,
            "demo_history": self.history_text,
            "demo_utterance": self.utterance,
            "demo_selection": ",".join(sorted_keys(self.selected_keys)) or "none",
            "demo_rewrite": _json_inner(self.gold_rewrite),
        }


def build_demonstrations(
    train_conversations: Iterable[Conversation],
    annotations: AnnotationSet,
    k: int,
    seed: int,
    include_responses: bool = True,
) -> list[Demonstration]:
    """Sample ``k`` annotated training turns without replacement.

    The pool is every training turn present in ``annotations``, in turn-id
    order; sampling uses ``random.Random(seed)``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    index = turn_index(train_conversations)
    pool = sorted((t for t in annotations.selections if t in index), key=turn_sort_key)
    if k > len(pool):
        raise ValidationError(f"asked for {k} demonstrations but only {len(pool)} annotated training turns exist")
    chosen = random.Random(seed).sample(pool, k)
    demos = []
    for turn_id in chosen:
        conv, turn = index[turn_id]
        demos.append(
            Demonstration(
                turn_id=turn_id,
                ptkb_text=format_ptkb(conv.ptkb),
                history_text=format_history(conv.history(turn_id), include_responses),
                utterance=turn.utterance,
                selected_keys=annotations.selection(turn_id),
                gold_rewrite=turn.resolved_utterance or turn.utterance,
            )
        )
    return demos


_NONE_WORDS = {"", "none", "no", "null", "n/a", "nothing", "[]"}
_KEY_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def parse_key_list(value) -> list[str]:
    """Keys from ``"1,3"``, ``"none"``, ``[1, 3]`` and similar model answers."""
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        items = [str(v).strip() for v in value]
    else:
        text = str(value).strip().strip("[]").strip()
        if text.lower().strip(".") in _NONE_WORDS:
            return []
        items = [p.strip().strip("'\"").strip() for p in re.split(r"[,;]", text)]
    items = [i for i in items if i]
    if any(not _KEY_RE.match(i) for i in items):
        raise ParseFailure(f"not a key list: {value!r}", str(value))
    if any(i.lower() in _NONE_WORDS for i in items):
        return []
    return items


def filter_keys(keys: Iterable[str], ptkb: Ptkb) -> tuple[frozenset[str], list[str]]:
    """Split ``keys`` into those present in ``ptkb`` and the unknown rest."""
    valid = set(ptkb.keys())
    keys = list(keys)
    return frozenset(k for k in keys if k in valid), [k for k in keys if k not in valid]


# --------------------------------------------------------------------------
# strategies


@dataclass
class Reformulator:
    """Issues the reformulation prompts for one experiment.

    ``retry_budget`` bounds the corrective follow-ups sent when the model's
    answer cannot be parsed.
    """

    client: ChatClient
    templates: TemplateLibrary = field(default_factory=TemplateLibrary)
    retry_budget: int = 1
    include_responses: bool = True

    def _prompt(self, name: str, demos: Sequence[Demonstration], **slots: str) -> str:
        template = self.templates.get(name).compose([d.slots() for d in demos])
        return render_prompt(template, slots)

    def _session(self, turn: ConversationTurn, history: Sequence[ConversationTurn], ptkb: Ptkb) -> dict[str, str]:
        return {
            "ptkb": format_ptkb(ptkb),
            "history": format_history(history, self.include_responses),
            "utterance": turn.utterance,
        }

    def reformulate_selected(
        self,
        turn: ConversationTurn,
        history: Sequence[ConversationTurn],
        ptkb_subset: Ptkb,
        demos: Sequence[Demonstration] = (),
        strategy: Strategy = Strategy.NONE,
    ) -> ReformulatedQuery:
        """One call with the given PTKB sentences (none, all, or an annotated subset)."""
        prompt = self._prompt("reformulate", demos, **self._session(turn, history, ptkb_subset))
        try:
            out = ask_structured(self.client, prompt, ["rewrite", "response"], self.retry_budget)
        except ParseFailure:
            logger.warning("turn %s: unparseable reformulation, using raw utterance", turn.turn_id)
            return ReformulatedQuery(turn.turn_id, turn.utterance, "", strategy, len(demos), None, ("parse_failure",))
        return _finish(turn, out["rewrite"], out["response"], strategy, len(demos), None, [])

    def str_reformulate(
        self,
        turn: ConversationTurn,
        history: Sequence[ConversationTurn],
        ptkb: Ptkb,
        demos: Sequence[Demonstration] = (),
    ) -> ReformulatedQuery:
        """Hypothetical response from the whole PTKB, then a rewrite from that response."""
        session = self._session(turn, history, ptkb)
        try:
            stage1 = ask_structured(
                self.client, self._prompt("str_response", demos, **session), ["response"], self.retry_budget
            )
        except ParseFailure:
            logger.warning("turn %s: STR stage 1 unparseable, falling back to full-PTKB rewrite", turn.turn_id)
            rq = self.reformulate_selected(turn, history, ptkb, demos, Strategy.STR)
            return replace(rq, flags=("str_stage1_fallback",) + rq.flags)
        hypothetical = _as_text(stage1["response"])
        prompt2 = self._prompt("str_rewrite", demos, **session, hypothetical_response=hypothetical)
        try:
            stage2 = ask_structured(self.client, prompt2, ["rewrite"], self.retry_budget)
        except ParseFailure:
            logger.warning("turn %s: STR stage 2 unparseable, using raw utterance", turn.turn_id)
            return ReformulatedQuery(
                turn.turn_id, turn.utterance, hypothetical, Strategy.STR, len(demos), None, ("parse_failure",)
            )
        return _finish(turn, stage2["rewrite"], hypothetical, Strategy.STR, len(demos), None, [])

    def sar_reformulate(
        self,
        turn: ConversationTurn,
        history: Sequence[ConversationTurn],
        ptkb: Ptkb,
        demos: Sequence[Demonstration] = (),
    ) -> ReformulatedQuery:
        """Selection, rewrite and response from a single call."""
        prompt = self._prompt("sar", demos, **self._session(turn, history, ptkb))
        fields = ["ptkb_selection", "rewrite", "response"]
        try:
            out = ask_structured(self.client, prompt, fields, self.retry_budget)
            keys = parse_key_list(out["ptkb_selection"])
        except ParseFailure:
            logger.warning("turn %s: unparseable SAR answer, using raw utterance", turn.turn_id)
            return ReformulatedQuery(
                turn.turn_id, turn.utterance, "", Strategy.SAR, len(demos), frozenset(), ("parse_failure",)
            )
        selected, unknown = filter_keys(keys, ptkb)
        flags = []
        if unknown:
            logger.warning("turn %s: model selected unknown PTKB keys %s", turn.turn_id, unknown)
            flags.append("unknown_keys")
        return _finish(turn, out["rewrite"], out["response"], Strategy.SAR, len(demos), selected, flags)

    def reformulate(
        self,
        strategy: Strategy,
        conversation: Conversation,
        turn: ConversationTurn,
        demos: Sequence[Demonstration] = (),
        annotations: AnnotationSet | None = None,
    ) -> ReformulatedQuery:
        """Dispatch one turn under ``strategy``."""
        history = conversation.history(turn.turn_id)
        ptkb = conversation.ptkb
        if strategy is Strategy.STR:
            return self.str_reformulate(turn, history, ptkb, demos)
        if strategy is Strategy.SAR:
            return self.sar_reformulate(turn, history, ptkb, demos)
        if strategy is Strategy.NONE:
            subset = Ptkb()
        elif strategy is Strategy.ALL:
            subset = ptkb
        else:
            if annotations is None:
                raise ValidationError(f"strategy {strategy.value} needs an annotation set")
            subset = ptkb.subset(annotations.selection(turn.turn_id))
        rq = self.reformulate_selected(turn, history, subset, demos, strategy)
        if strategy.annotation_source:
            rq = replace(rq, selected_keys=frozenset(subset.keys()))
        return rq


def _as_text(value) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


def _finish(turn, rewrite, response, strategy, shots, selected, flags) -> ReformulatedQuery:
    rewrite, response = _as_text(rewrite).strip(), _as_text(response).strip()
    if not rewrite:
        rewrite = turn.utterance
        flags = [*flags, "empty_rewrite"]
    return ReformulatedQuery(turn.turn_id, rewrite, response, strategy, shots, selected, tuple(flags))
