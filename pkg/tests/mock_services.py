"""Scripted stand-ins for the chat and embedding endpoints (via httpx.MockTransport)."""

from __future__ import annotations

import hashlib
import json
import re

import httpx

WORD_RE = re.compile(r"[a-z0-9]+")


def chat_response(text: str, status: int = 200) -> httpx.Response:
    if status != 200:
        return httpx.Response(status, text="scripted failure")
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


class MockChat:
    """Chat endpoint answering from ``responder(prompt)``.

    ``script`` (a list) takes precedence: each request pops the next entry,
    either a response text or an int HTTP status.
    """

    def __init__(self, responder=None, script=None):
        self.responder = responder or heuristic_answer
        self.script = list(script) if script is not None else None
        self.prompts: list[str] = []
        self.bodies: list[dict] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.bodies.append(body)
        prompt = body["messages"][-1]["content"]
        self.prompts.append(prompt)
        if self.script is not None:
            item = self.script.pop(0)
            if isinstance(item, int):
                return chat_response("", item)
            return chat_response(item)
        return chat_response(self.responder(prompt))

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


class NoNetwork:
    """Transport that fails the test on any request."""

    def __init__(self):
        self.calls = 0

    def __call__(self, request):
        self.calls += 1
        raise AssertionError(f"unexpected network call to {request.url}")

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


def hashed_embedding(text: str, dim: int = 16) -> list[float]:
    v = [0.0] * dim
    for w in WORD_RE.findall(text.lower()):
        v[int(hashlib.sha1(w.encode()).hexdigest(), 16) % dim] += 1.0
    return v


class MockEmbed:
    def __init__(self, dim: int = 16):
        self.dim = dim
        self.requests: list[list[str]] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        texts = json.loads(request.content)["input"]
        self.requests.append(texts)
        data = [{"index": i, "embedding": hashed_embedding(t, self.dim)} for i, t in enumerate(texts)]
        return httpx.Response(200, json={"data": data})

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


# --------------------------------------------------------------------------
# a crude "model" that follows the bundled templates' output contracts


def _input_part(prompt: str) -> str:
    return prompt[prompt.rfind("\n\n", 0, prompt.rfind("Current question: ")) :]


def _ptkb(part: str) -> dict[str, str]:
    for marker in ("PTKB:\n", "Facts about the user:\n"):
        i = part.find(marker)
        if i >= 0:
            block = part[i + len(marker) : part.find("\nConversation:", i)]
            out = {}
            for line in block.splitlines():
                key, sep, text = line.partition(". ")
                if sep:
                    out[key] = text
            return out
    return {}


def _line(part: str, prefix: str) -> str:
    i = part.find(prefix)
    return part[i + len(prefix) :].split("\n", 1)[0] if i >= 0 else ""


# what the scripted model "knows" about the mini fixture's topics
ASSOCIATIONS = {
    "cook": {"vegetarian", "meat"},
    "dessert": {"allergic", "peanuts"},
    "nearby": {"montreal"},
    "weekend": {"jazz", "music"},
    "around": {"wheelchair"},
}


def _content(text: str) -> set[str]:
    words = {w for w in WORD_RE.findall(text.lower()) if len(w) > 3}
    for w in list(words):
        words |= ASSOCIATIONS.get(w, set())
    return words


def heuristic_answer(prompt: str) -> str:
    part = _input_part(prompt)
    utterance = _line(part, "Current question: ")
    ptkb = _ptkb(part)
    history = part[part.find("Conversation:") : part.find("Current question:")]
    context = _content(utterance + " " + history)
    related = [k for k, s in ptkb.items() if _content(s) & context]

    if "Decide which sentences are relevant" in prompt:
        return json.dumps({"ptkb_selection": ",".join(related) or "none"})
    if "In one step" in prompt:
        rewrite = " ".join([utterance, *(ptkb[k] for k in related)])
        return json.dumps({"ptkb_selection": ",".join(related) or "none", "rewrite": rewrite, "response": ""})
    if "Draft response: " in part:
        return json.dumps({"rewrite": f"{utterance} {_line(part, 'Draft response: ')}"})
    if "Write the response a knowledgeable" in prompt:
        return json.dumps({"response": " ".join(ptkb.values())})
    rewrite = " ".join([utterance, *ptkb.values()])
    return json.dumps({"ptkb_selection": ",".join(ptkb) or "none", "rewrite": rewrite, "response": ""})
