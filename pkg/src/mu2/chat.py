"""Chat clients for the synthesis stages.

Everything speaks one method, complete(prompt) -> str. The HTTP client talks
to an OpenAI-style /chat/completions endpoint. The mock client recognizes
each pipeline prompt and fabricates a plausible reply from the prompt text
alone, so full runs are deterministic and offline. A transcript recorder can
wrap any client, and a replay client serves recorded replies back.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time

import requests

from . import textutil

DEFAULT_AUTH_ENV = "MU2_API_TOKEN"


class ChatError(RuntimeError):
    """A chat request could not be served."""


def prompt_key(prompt: str) -> str:
    """Stable identifier for a prompt, used to key transcripts."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HttpChatClient:
    """Single-turn chat over an OpenAI-style HTTP API.

    Failures are retried with exponential backoff. The bearer token is read
    from the environment at call time so a long-lived client picks up
    credential changes. Pass a session and sleep function to test without a
    network or real delays.
    """

    def __init__(self, base_url: str, model: str, *, temperature: float = 0.0,
                 timeout: float = 30.0, retries: int = 3, backoff: float = 1.0,
                 auth_env: str = DEFAULT_AUTH_ENV, session=None, sleep=time.sleep):
        if not base_url:
            raise ValueError("base_url must be non-empty")
        if not model:
            raise ValueError("model must be non-empty")
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.auth_env = auth_env
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.url, json=payload,
                                         headers=self._headers(),
                                         timeout=self.timeout)
                resp.raise_for_status()
                reply = resp.json()["choices"][0]["message"]["content"]
                if not isinstance(reply, str):
                    raise ChatError("reply content is not a string")
                return reply
            except Exception as err:  # noqa: BLE001 - every failure is retryable
                last = err
        raise ChatError(
            f"chat request failed after {self.retries + 1} attempts: {last}")


class TranscriptRecorder:
    """Wraps a client and appends every exchange to a JSONL transcript."""

    def __init__(self, client, path):
        self.client = client
        self.path = path
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        reply = self.client.complete(prompt)
        line = json.dumps({"key": prompt_key(prompt), "prompt": prompt,
                           "reply": reply}, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return reply


class ReplayClient:
    """Serves replies from a transcript; unknown prompts are an error."""

    def __init__(self, path):
        self.replies = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    record = json.loads(line)
                    self.replies[record["key"]] = record["reply"]

    def complete(self, prompt: str) -> str:
        key = prompt_key(prompt)
        if key not in self.replies:
            raise ChatError(f"transcript has no reply for prompt key {key}")
        return self.replies[key]


def _fenced(prompt: str, lead: str) -> str:
    """Text of the fenced block that follows the given lead-in line."""
    m = re.search(re.escape(lead) + r"\n```\n(.*?)\n```", prompt, re.DOTALL)
    if m is None:
        raise ChatError(f"prompt has no fenced block after {lead!r}")
    return m.group(1)


_STOP = {"what", "does", "the", "image", "show", "about", "is", "are", "of",
         "a", "an", "in", "on", "how", "any", "there"}


class MockChatClient:
    """Deterministic offline stand-in for a chat model.

    Replies are pure functions of the prompt, so repeated runs produce
    byte-identical pipelines. Each synthesis stage is recognized by a line
    unique to its template.
    """

    def __init__(self):
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if "Imagine you are assessing a student" in prompt:
            return self._questions(prompt)
        if "Please consider and answer the question in the following format:" in prompt:
            return self._answer(prompt)
        if "You are an expert in radiology. Now you are reviewing" in prompt:
            return "Yes"
        if "Help me edit the narrative below:" in prompt:
            narrative = _fenced(prompt, "**The narrative:**")
            return re.sub(r"report", "image", narrative, flags=re.IGNORECASE)
        if "Here is your self talk when viewing the image:" in prompt:
            return _fenced(prompt, "Here is your self talk when viewing the image:")
        if "your task is to paraphrase a given radiology report" in prompt:
            return _fenced(prompt, "The original report:")
        if "translation, please provide the" in prompt:
            return self._translation(prompt)
        raise ChatError("mock chat client does not recognize this prompt")

    def _questions(self, prompt: str) -> str:
        report = _fenced(prompt, "Here is a medical radiology report for a CT image.")
        sentences = [s for s in re.split(r"(?<=[.!?])\s+", report.strip()) if s.strip()]
        lines = []
        for i, sentence in enumerate(sentences[:4]):
            tokens = [w for w in textutil.words(sentence) if w not in _STOP][:3]
            topic = " ".join(tokens) or "the overall study"
            lines.append(f"{i + 1}. What does the image show about {topic}?")
        if not lines:
            lines = ["1. What does the image show overall?"]
        return "\n".join(lines)

    def _answer(self, prompt: str) -> str:
        question = _fenced(prompt, "Now we have a question:")
        tokens = [w for w in textutil.words(question) if w not in _STOP][:4]
        topic = " ".join(tokens) or "the visible findings"
        thinking = ("On review of the scan I trace the relevant anatomy slice "
                    "by slice, compare attenuation and margins against the "
                    f"surrounding tissue, and weigh whether the appearance fits {topic}.")
        answer = f"The appearance is most consistent with {topic}."
        return f"Thinking: {thinking}\n\nAnswer: {answer}"

    def _translation(self, prompt: str) -> str:
        _, _, tail = prompt.partition("apart from the translation.\n")
        _, sep, source = tail.partition(": ")
        if not sep:
            raise ChatError("translation prompt has no source text")
        return source
