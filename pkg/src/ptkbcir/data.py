"""Domain types and the file formats they travel in.

Formats handled here:

* topics: JSON list of conversations with a ``ptkb`` map and ``turns`` list
* qrels: ``turn_id 0 doc_id grade``
* runs: ``turn_id Q0 doc_id rank score tag``
* collection: ``doc_id<TAB>text``
* annotation sets: ``turn_id<TAB>source<TAB>k1,k2,...``
"""

from __future__ import annotations

import enum
import json
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

TURN_ID_RE = re.compile(r"^(\d+)-(\d+)-(\d+)$")


def split_turn_id(turn_id: str) -> tuple[int, int, int]:
    m = TURN_ID_RE.match(turn_id)
    if not m:
        raise ValidationError(f"turn id {turn_id!r} is not of the form <topic>-<conversation>-<turn>")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def turn_sort_key(turn_id: str):
    """Numeric ordering for canonical ids; anything else sorts after, lexically."""
    m = TURN_ID_RE.match(turn_id)
    if m:
        return (0, int(m.group(1)), int(m.group(2)), int(m.group(3)), "")
    return (1, 0, 0, 0, turn_id)


@dataclass(frozen=True)
class PtkbSentence:
    key: str
    text: str

    def __post_init__(self):
        if not self.key:
            raise ValidationError("PTKB sentence key is empty")
        if not self.text.strip():
            raise ValidationError(f"PTKB sentence {self.key!r} has empty text")


@dataclass(frozen=True)
class Ptkb:
    sentences: tuple[PtkbSentence, ...] = ()

    def __post_init__(self):
        seen = set()
        for s in self.sentences:
            if s.key in seen:
                raise ValidationError(f"duplicate PTKB key {s.key!r}")
            seen.add(s.key)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "Ptkb":
        return cls(tuple(PtkbSentence(str(k), v) for k, v in mapping.items()))

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[PtkbSentence]:
        return iter(self.sentences)

    def keys(self) -> list[str]:
        return [s.key for s in self.sentences]

    def __contains__(self, key: object) -> bool:
        return any(s.key == key for s in self.sentences)

    def subset(self, keys: Iterable[str]) -> "Ptkb":
        """Sentences whose key is in ``keys``, in PTKB order."""
        wanted = set(keys)
        return Ptkb(tuple(s for s in self.sentences if s.key in wanted))


@dataclass(frozen=True)
class ConversationTurn:
    turn_id: str
    utterance: str
    resolved_utterance: str | None = None
    canonical_response: str | None = None
    human_ptkb_keys: frozenset[str] = frozenset()
    # True when the source carried a provenance field for this turn
    ptkb_assessed: bool = False

    def __post_init__(self):
        split_turn_id(self.turn_id)
        if not self.utterance.strip():
            raise ValidationError(f"turn {self.turn_id} has an empty utterance")

    @property
    def number(self) -> int:
        return split_turn_id(self.turn_id)[2]


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    title: str
    ptkb: Ptkb
    turns: tuple[ConversationTurn, ...]

    def __post_init__(self):
        prev = 0
        for t in self.turns:
            if not t.turn_id.startswith(self.conversation_id + "-"):
                raise ValidationError(f"turn {t.turn_id} does not belong to conversation {self.conversation_id}")
            if t.number <= prev:
                raise ValidationError(f"turn numbers not strictly increasing at {t.turn_id}")
            prev = t.number

    @property
    def topic(self) -> str:
        return self.conversation_id.split("-")[0]

    def history(self, turn_id: str) -> tuple[ConversationTurn, ...]:
        """Turns strictly before ``turn_id``."""
        for i, t in enumerate(self.turns):
            if t.turn_id == turn_id:
                return self.turns[:i]
        raise KeyError(turn_id)


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class Qrels:
    """Graded judgments, stored per turn: ``by_turn[turn_id][doc_id] = grade``."""

    by_turn: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    @property
    def judgments(self) -> dict[tuple[str, str], int]:
        return {(t, d): g for t, docs in self.by_turn.items() for d, g in docs.items()}

    def turn_ids(self) -> list[str]:
        return sorted(self.by_turn, key=turn_sort_key)

    def for_turn(self, turn_id: str) -> Mapping[str, int]:
        return self.by_turn.get(turn_id, {})

    def __contains__(self, turn_id: object) -> bool:
        return turn_id in self.by_turn

    def __len__(self) -> int:
        return len(self.by_turn)


@dataclass(frozen=True)
class Run:
    tag: str
    rankings: Mapping[str, list[tuple[str, float]]]

    def validate(self, depth: int | None = None) -> None:
        for turn_id, ranking in self.rankings.items():
            docs = [d for d, _ in ranking]
            if len(set(docs)) != len(docs):
                raise ValidationError(f"duplicate doc ids in ranking for {turn_id}")
            for (_, a), (_, b) in zip(ranking, ranking[1:]):
                if b > a:
                    raise ValidationError(f"scores increase within ranking for {turn_id}")
            if depth is not None and len(ranking) > depth:
                raise ValidationError(f"ranking for {turn_id} longer than depth {depth}")

    def ranked_doc_ids(self, turn_id: str) -> list[str]:
        return [d for d, _ in self.rankings.get(turn_id, [])]


class AnnotationSource(str, enum.Enum):
    HUMAN = "human"
    AUTOMATIC = "automatic"
    LLM = "llm"


@dataclass(frozen=True)
class AnnotationSet:
    source: AnnotationSource
    selections: Mapping[str, frozenset[str]]
    # turn_id -> diagnostic flags, e.g. "parse_failure", "unknown_keys"
    flags: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def selection(self, turn_id: str) -> frozenset[str]:
        return self.selections.get(turn_id, frozenset())

    def validate(self, conversations: Iterable[Conversation]) -> None:
        ptkb_of = {t.turn_id: c.ptkb for c in conversations for t in c.turns}
        for turn_id, keys in self.selections.items():
            if turn_id not in ptkb_of:
                raise ValidationError(f"annotation for unknown turn {turn_id}")
            bad = sorted(k for k in keys if k not in ptkb_of[turn_id])
            if bad:
                raise ValidationError(f"turn {turn_id}: keys {bad} not in PTKB")


# --------------------------------------------------------------------------
# topics


def _req(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise ParseError(path, "expected an object")
    if key not in obj:
        raise ParseError(f"{path}.{key}", "missing")
    return obj[key]


def _text(value, path: str) -> str:
    if not isinstance(value, str):
        raise ParseError(path, "expected a string")
    return value


def parse_topics(document: bytes | str) -> list[Conversation]:
    try:
        data = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError("$", f"invalid JSON: {e}") from e
    if not isinstance(data, list):
        raise ParseError("$", "expected a list of conversations")

    conversations = []
    seen_turns: set[str] = set()
    for ci, conv in enumerate(data):
        cpath = f"$[{ci}]"
        number = str(_req(conv, "number", cpath))
        title = conv.get("title", "")
        raw_ptkb = conv.get("ptkb", {})
        if not isinstance(raw_ptkb, dict):
            raise ParseError(f"{cpath}.ptkb", "expected an object of key -> sentence")
        ptkb = Ptkb.from_mapping({k: _text(v, f"{cpath}.ptkb.{k}") for k, v in raw_ptkb.items()})
        raw_turns = _req(conv, "turns", cpath)
        if not isinstance(raw_turns, list):
            raise ParseError(f"{cpath}.turns", "expected a list")

        turns = []
        for ti, raw in enumerate(raw_turns):
            tpath = f"{cpath}.turns[{ti}]"
            if "turn_id" in raw:
                tid = str(raw["turn_id"])
            else:
                tid = str(_req(raw, "number", tpath))
            if not TURN_ID_RE.match(tid):
                tid = f"{number}-{tid}"
            if tid in seen_turns:
                raise ValidationError(f"duplicate turn id {tid} at {tpath}")
            seen_turns.add(tid)
            utterance = _text(_req(raw, "utterance", tpath), f"{tpath}.utterance")
            provenance = raw.get("ptkb_provenance")
            if provenance is not None and not isinstance(provenance, list):
                raise ParseError(f"{tpath}.ptkb_provenance", "expected a list of keys")
            keys = frozenset(str(k) for k in provenance or [])
            try:
                turns.append(
                    ConversationTurn(
                        turn_id=tid,
                        utterance=utterance,
                        resolved_utterance=raw.get("resolved_utterance"),
                        canonical_response=raw.get("response"),
                        human_ptkb_keys=keys,
                        ptkb_assessed=provenance is not None,
                    )
                )
            except ValidationError as e:
                raise ValidationError(f"{tpath}: {e}") from e
        conversations.append(Conversation(number, title, ptkb, tuple(turns)))
    return conversations


def dump_topics(conversations: Iterable[Conversation]) -> bytes:
    out = []
    for c in conversations:
        turns = []
        for t in c.turns:
            raw: dict = {"turn_id": t.number, "utterance": t.utterance}
            if t.resolved_utterance is not None:
                raw["resolved_utterance"] = t.resolved_utterance
            if t.canonical_response is not None:
                raw["response"] = t.canonical_response
            if t.ptkb_assessed:
                raw["ptkb_provenance"] = sorted(t.human_ptkb_keys, key=_key_order)
            turns.append(raw)
        out.append(
            {
                "number": c.conversation_id,
                "title": c.title,
                "ptkb": {s.key: s.text for s in c.ptkb},
                "turns": turns,
            }
        )
    return json.dumps(out, indent=2, ensure_ascii=False).encode("utf-8")


def _key_order(key: str):
    return (0, int(key), "") if key.isdigit() else (1, 0, key)


def sorted_keys(keys: Iterable[str]) -> list[str]:
    """PTKB keys in numeric order when they are numbers."""
    return sorted(keys, key=_key_order)


# --------------------------------------------------------------------------
# qrels / runs / collection


def _lines(document: bytes | str) -> Iterator[tuple[int, str]]:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip():
            yield lineno, line


def parse_qrels(document: bytes | str) -> Qrels:
    by_turn: dict[str, dict[str, int]] = {}
    for lineno, line in _lines(document):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"line {lineno}", f"expected 4 fields, got {len(parts)}")
        turn_id, _, doc_id, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise ParseError(f"line {lineno}", f"grade {grade!r} is not an integer") from None
        if g < 0:
            raise ValidationError(f"line {lineno}: negative grade {g}")
        docs = by_turn.setdefault(turn_id, {})
        if doc_id in docs:
            raise ValidationError(f"line {lineno}: second grade for ({turn_id}, {doc_id})")
        docs[doc_id] = g
    return Qrels(by_turn)


def write_qrels(qrels: Qrels) -> bytes:
    lines = []
    for t in qrels.turn_ids():
        for d, g in qrels.by_turn[t].items():
            lines.append(f"{t} 0 {d} {g}\n")
    return "".join(lines).encode("utf-8")


def write_run(run: Run, depth: int | None = None) -> bytes:
    run.validate()
    lines = []
    for turn_id in sorted(run.rankings, key=turn_sort_key):
        ranking = run.rankings[turn_id]
        if depth is not None:
            ranking = ranking[:depth]
        for rank, (doc_id, score) in enumerate(ranking, 1):
            lines.append(f"{turn_id} Q0 {doc_id} {rank} {score:.6f} {run.tag}\n")
    return "".join(lines).encode("utf-8")


def parse_run(document: bytes | str) -> Run:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    tag = ""
    for lineno, line in _lines(document):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"line {lineno}", f"expected 6 fields, got {len(parts)}")
        turn_id, _, doc_id, rank, score, line_tag = parts
        try:
            r, s = int(rank), float(score)
        except ValueError:
            raise ParseError(f"line {lineno}", "rank must be an integer and score a number") from None
        tag = tag or line_tag
        rows.setdefault(turn_id, []).append((r, doc_id, s))

    rankings = {}
    for turn_id, entries in rows.items():
        entries.sort()
        if [r for r, _, _ in entries] != list(range(1, len(entries) + 1)):
            raise ValidationError(f"ranks for {turn_id} are not 1..{len(entries)}")
        rankings[turn_id] = [(d, s) for _, d, s in entries]
    run = Run(tag, rankings)
    run.validate()
    return run


def parse_collection(document: bytes | str) -> Iterator[Document]:
    for lineno, line in _lines(document):
        doc_id, sep, text = line.partition("\t")
        if not sep or not doc_id:
            raise ParseError(f"line {lineno}", "expected doc_id<TAB>text")
        yield Document(doc_id, text)


def write_collection(docs: Iterable[Document]) -> bytes:
    return "".join(f"{d.doc_id}\t{d.text}\n" for d in docs).encode("utf-8")


# --------------------------------------------------------------------------
# annotation sets


def write_annotations(annotations: AnnotationSet) -> bytes:
    lines = []
    for turn_id in sorted(annotations.selections, key=turn_sort_key):
        keys = ",".join(sorted_keys(annotations.selections[turn_id]))
        lines.append(f"{turn_id}\t{annotations.source.value}\t{keys}\n")
    return "".join(lines).encode("utf-8")


def parse_annotations(document: bytes | str, conversations: Iterable[Conversation] | None = None) -> AnnotationSet:
    selections: dict[str, frozenset[str]] = {}
    source = None
    for lineno, line in _lines(document):
        parts = line.rstrip("\n").split("\t")
        if len(parts) == 2:
            parts.append("")
        if len(parts) != 3:
            raise ParseError(f"line {lineno}", "expected turn_id<TAB>source<TAB>keys")
        turn_id, src, keys = parts
        try:
            line_source = AnnotationSource(src.strip().lower())
        except ValueError:
            raise ParseError(f"line {lineno}", f"unknown annotation source {src!r}") from None
        if source is not None and line_source is not source:
            raise ValidationError(f"line {lineno}: mixed annotation sources")
        source = line_source
        selections[turn_id] = frozenset(k.strip() for k in keys.split(",") if k.strip())
    result = AnnotationSet(source or AnnotationSource.HUMAN, selections)
    if conversations is not None:
        result.validate(conversations)
    return result


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DatasetStats:
    topics: int = 0
    conversations: int = 0
    turns: int = 0
    assessed_turns: int = 0
    ptkb_sentences: int = 0
    ptkb_assessed_turns: int = 0
    ptkb_assessments: int = 0
    relevant_ptkb: int = 0

    def as_rows(self) -> list[tuple[str, int]]:
        return [
            ("# Topic", self.topics),
            ("# Conversations", self.conversations),
            ("# Turns (Queries)", self.turns),
            ("# Assessed Turns (Queries)", self.assessed_turns),
            ("# PTKB sentences", self.ptkb_sentences),
            ("# PTKB assessed turns", self.ptkb_assessed_turns),
            ("# PTKB assessments", self.ptkb_assessments),
            ("# Relevant PTKB", self.relevant_ptkb),
        ]


def dataset_stats(
    conversations: Iterable[Conversation],
    qrels: Qrels | None = None,
    ptkb_judgments: Qrels | None = None,
) -> DatasetStats:
    """Table-style counts for a parsed dataset.

    ``ptkb_judgments`` is a qrels-format file grading (turn, PTKB key) pairs.
    Without it, a turn counts as PTKB-assessed when the topics file carries a
    provenance field for it, and every sentence of its PTKB counts as one
    assessment.
    """
    conversations = list(conversations)
    turns = [(c, t) for c in conversations for t in c.turns]
    if ptkb_judgments is not None:
        ptkb_assessed = len(ptkb_judgments)
        assessments = sum(len(v) for v in ptkb_judgments.by_turn.values())
        relevant = sum(1 for v in ptkb_judgments.by_turn.values() for g in v.values() if g > 0)
    else:
        assessed = [(c, t) for c, t in turns if t.ptkb_assessed]
        ptkb_assessed = len(assessed)
        assessments = sum(len(c.ptkb) for c, _ in assessed)
        relevant = sum(len(t.human_ptkb_keys) for _, t in turns)
    return DatasetStats(
        topics=len({c.topic for c in conversations}),
        conversations=len(conversations),
        turns=len(turns),
        assessed_turns=len(qrels) if qrels is not None else 0,
        ptkb_sentences=sum(len(c.ptkb) for c in conversations),
        ptkb_assessed_turns=ptkb_assessed,
        ptkb_assessments=assessments,
        relevant_ptkb=relevant,
    )


def turn_index(conversations: Iterable[Conversation]) -> dict[str, tuple[Conversation, ConversationTurn]]:
    return {t.turn_id: (c, t) for c in conversations for t in c.turns}
