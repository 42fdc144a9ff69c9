"""Prompt templates, a cached chat-completion client, and structured-output parsing."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import httpx

from .cache import RecordCache, content_hash
from .errors import GatewayError, ParseFailure, ValidationError
from .http import post_json

logger = logging.getLogger(__name__)

SEPARATOR = "\n\n"
_PLACEHOLDER_RE = re.compile(r"\{\{|\}\}|\{([A-Za-z_]\w*)\}")
_HEADER_RE = re.compile(r"^\[(Instruction|Demonstration|Input)\]\s*$")


class SectionKind(str, enum.Enum):
    INSTRUCTION = "Instruction"
    DEMONSTRATION = "Demonstration"
    INPUT = "Input"


class MissingSlotError(ValidationError, KeyError):
    def __init__(self, name: str, template: str):
        self.name = name
        super().__init__(f"template {template!r}: no value for placeholder {{{name}}}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    sections: tuple[tuple[SectionKind, str], ...]

    def __post_init__(self):
        kinds = [k for k, _ in self.sections]
        if (
            len(kinds) < 2
            or kinds[0] is not SectionKind.INSTRUCTION
            or kinds[-1] is not SectionKind.INPUT
            or any(k is not SectionKind.DEMONSTRATION for k in kinds[1:-1])
        ):
            raise ValidationError(f"template {self.name!r}: sections must be Instruction, Demonstration*, Input")

    @property
    def demonstration_count(self) -> int:
        return sum(1 for k, _ in self.sections if k is SectionKind.DEMONSTRATION)


def escape(text: str) -> str:
    """Make ``text`` survive rendering literally."""
    return text.replace("{", "{{").replace("}", "}}")


def substitute(text: str, slots: Mapping[str, str], template_name: str = "") -> str:
    def repl(m: re.Match) -> str:
        token = m.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        name = m.group(1)
        if name not in slots:
            raise MissingSlotError(name, template_name)
        return str(slots[name])

    return _PLACEHOLDER_RE.sub(repl, text)


def render_sections(template: PromptTemplate, slots: Mapping[str, str]) -> list[str]:
    return [substitute(text, slots, template.name) for _, text in template.sections]


def render_prompt(template: PromptTemplate, slots: Mapping[str, str]) -> str:
    """Sections in declared order, joined by one blank line."""
    return SEPARATOR.join(render_sections(template, slots))


@dataclass(frozen=True)
class TemplateFile:
    """A user-editable prompt file.

    The file is split by one-line headers ``[Instruction]``, ``[Demonstration]``
    and ``[Input]``. The demonstration body is a prototype, instantiated once
    per in-context example; it may be omitted for templates never used with
    examples.
    """

    name: str
    instruction: str
    input: str
    demonstration: str | None = None

    @classmethod
    def parse(cls, name: str, text: str) -> "TemplateFile":
        bodies: dict[str, list[str]] = {}
        current = None
        for lineno, line in enumerate(text.splitlines(), 1):
            m = _HEADER_RE.match(line)
            if m:
                current = m.group(1)
                if current in bodies:
                    raise ValidationError(f"template {name!r}: section [{current}] repeated at line {lineno}")
                bodies[current] = []
            elif current is None:
                if line.strip():
                    raise ValidationError(f"template {name!r}: text before first section header at line {lineno}")
            else:
                bodies[current].append(line)
        for required in ("Instruction", "Input"):
            if required not in bodies:
                raise ValidationError(f"template {name!r}: missing [{required}] section")
        body = {k: "\n".join(v).strip("\n") for k, v in bodies.items()}
        return cls(name, body["Instruction"], body["Input"], body.get("Demonstration"))

    def compose(self, demonstrations: Sequence[Mapping[str, str]] = ()) -> PromptTemplate:
        """Build a template with one Demonstration section per example.

        Each demonstration is rendered with its own slots (plus ``index``,
        counting from 1) and escaped, so only the Input and Instruction
        placeholders stay open.
        """
        if demonstrations and self.demonstration is None:
            raise ValidationError(f"template {self.name!r} has no [Demonstration] section")
        sections = [(SectionKind.INSTRUCTION, self.instruction)]
        for i, demo in enumerate(demonstrations, 1):
            rendered = substitute(self.demonstration, {**demo, "index": str(i)}, self.name)
            sections.append((SectionKind.DEMONSTRATION, escape(rendered)))
        sections.append((SectionKind.INPUT, self.input))
        return PromptTemplate(self.name, tuple(sections))


class TemplateLibrary:
    """Template files looked up by name in a directory, falling back to the bundled set."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._loaded: dict[str, TemplateFile] = {}

    def get(self, name: str) -> TemplateFile:
        if name not in self._loaded:
            path = self.directory / f"{name}.txt" if self.directory else None
            if path is not None and path.exists():
                text = path.read_text(encoding="utf-8")
            else:
                text = resources.files("ptkbcir.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")
            self._loaded[name] = TemplateFile.parse(name, text)
        return self._loaded[name]


# --------------------------------------------------------------------------
# chat


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")

    @classmethod
    def from_prompt(cls, model: str, prompt: str, **kw) -> "ChatRequest":
        return cls(model, (("user", prompt),), **kw)

    @property
    def cache_key(self) -> str:
        return content_hash(self.model, repr(float(self.temperature)), json.dumps(self.messages, ensure_ascii=False))

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class CachedResponse:
    cache_key: str
    text: str
    timestamp: float
    request_digest: str = ""


class ChatClient:
    """Chat-completion client with an append-only response cache.

    A request whose cache key is already stored never reaches the network.
    ``network_calls`` counts HTTP attempts (retries included); ``requests``
    counts cache misses.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "gpt-3.5-turbo-16k",
        cache_path: str | Path | None = None,
        api_key: str | None = None,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        retries: int = 4,
        backoff: float = 1.0,
        parallelism: int = 4,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("PTKBCIR_API_KEY", "")
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.retries = retries
        self.backoff = backoff
        self.cache = RecordCache(cache_path)
        self.network_calls: list[str] = []
        self.requests = 0
        self._gate = threading.BoundedSemaphore(max(1, parallelism))
        self._count_lock = threading.Lock()
        self._http = httpx.Client(transport=transport, timeout=timeout)

    def request(self, prompt: str) -> ChatRequest:
        return ChatRequest.from_prompt(self.model, prompt, temperature=self.temperature, max_tokens=self.max_tokens)

    def lookup(self, request: ChatRequest) -> CachedResponse | None:
        rec = self.cache.get(request.cache_key)
        if rec is None:
            return None
        return CachedResponse(rec["key"], rec["text"], rec["timestamp"], rec.get("request", ""))

    def chat(self, request: ChatRequest) -> str:
        cached = self.cache.get(request.cache_key)
        if cached is not None:
            return cached["text"]
        payload = request.payload()
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._gate:
            body = post_json(
                self._http,
                self.endpoint,
                payload,
                headers=headers,
                retries=self.retries,
                backoff=self.backoff,
                counter=self.network_calls,
            )
        with self._count_lock:
            self.requests += 1
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"malformed chat response: {e}") from e
        if not isinstance(text, str):
            raise GatewayError("chat response content is not text")
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode()).hexdigest()
        self.cache.append({"key": request.cache_key, "request": digest, "text": text, "timestamp": time.time()})
        return text

    def ask(self, prompt: str) -> str:
        return self.chat(self.request(prompt))


# --------------------------------------------------------------------------
# structured output

_FENCE_RE = re.compile(r"```[A-Za-z]*\s*\n(.*?)```", re.DOTALL)


def _json_objects(text: str):
    for m in _FENCE_RE.finditer(text):
        try:
            yield json.loads(m.group(1))
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch == "{":
            try:
                obj, _ = decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                continue
            yield obj


def extract_fields(text: str, expected_fields: Sequence[str]) -> dict:
    for obj in _json_objects(text):
        if isinstance(obj, dict) and all(f in obj for f in expected_fields):
            return {f: obj[f] for f in expected_fields}
    raise ParseFailure(f"no structured block with fields {list(expected_fields)}", text)


def parse_structured_output(
    text: str,
    expected_fields: Sequence[str],
    retry_budget: int = 0,
    reask: Callable[[int], str] | None = None,
) -> dict:
    """Pull ``expected_fields`` out of a fenced or bare JSON object in ``text``.

    When parsing fails and ``reask`` is given, it is called with the attempt
    number (from 1) to obtain fresh text, at most ``retry_budget`` times.
    Raises ParseFailure once the budget is spent.
    """
    if not expected_fields:
        raise ValueError("expected_fields must be non-empty")
    attempt = 0
    while True:
        try:
            return extract_fields(text, expected_fields)
        except ParseFailure:
            if reask is None or attempt >= retry_budget:
                raise
            attempt += 1
            text = reask(attempt)


REASK_MESSAGE = "Your previous answer could not be parsed. Reply with only a JSON object with the fields: {fields}."


def ask_structured(client: ChatClient, prompt: str, expected_fields: Sequence[str], retry_budget: int = 1) -> dict:
    """One chat call plus up to ``retry_budget`` corrective follow-ups."""
    request = client.request(prompt)
    messages = list(request.messages)
    text = client.chat(request)

    def reask(_attempt: int) -> str:
        nonlocal text
        messages.extend([("assistant", text), ("user", REASK_MESSAGE.format(fields=", ".join(expected_fields)))])
        text = client.chat(
            ChatRequest(client.model, tuple(messages), temperature=client.temperature, max_tokens=client.max_tokens)
        )
        return text

    return parse_structured_output(text, expected_fields, retry_budget, reask)

