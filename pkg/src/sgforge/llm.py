"""Chat-completion gateway: prompt templates, HTTP backend, fixture-backed mock.

Every LLM/LVLM call in the pipeline goes through :class:`ChatClient`. The mock
backend is a pure function of ``(prompt, round_index, attachment)`` and the
fixture store, which keeps builds reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "SGFORGE_LLM_API_KEY"
PLACEHOLDERS = frozenset({"node_info", "label_set", "instructions"})
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ClientError(Exception):
    """Backend failure. ``retries`` is how many retries were spent."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class Timeout(ClientError):
    pass


class RateLimited(ClientError):
    pass


class AuthError(ClientError):
    pass


class FixtureMiss(ClientError):
    pass


class TemplateError(ValueError):
    pass


class UnboundPlaceholder(TemplateError):
    pass


def digest(prompt: str, round_index: int = 0, attachment: str | None = None) -> str:
    """Fixture key for one request."""
    h = hashlib.sha256()
    h.update(prompt.encode("utf-8"))
    h.update(b"\x1f")
    h.update(str(int(round_index)).encode())
    if attachment:
        h.update(b"\x1f")
        h.update(attachment.encode("utf-8"))
    return h.hexdigest()


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def __post_init__(self):
        unknown = set(self.placeholders()) - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"{self.template_id}: unknown placeholders {sorted(unknown)}")
        residue = _PLACEHOLDER_RE.sub("", self.body)
        if "{" in residue or "}" in residue:
            raise TemplateError(f"{self.template_id}: stray brace in template body")

    def placeholders(self) -> list[str]:
        return _PLACEHOLDER_RE.findall(self.body)

    @classmethod
    def load(cls, name: str, directory: str | Path | None = None) -> "PromptTemplate":
        """Load ``<name>.txt`` from ``directory`` or the bundled templates."""
        if directory is not None:
            path = Path(directory) / f"{name}.txt"
            if path.exists():
                return cls(name, path.read_text(encoding="utf-8"))
        text = resources.files("sgforge.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")
        return cls(name, text)


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    missing = sorted(set(template.placeholders()) - set(bindings))
    if missing:
        raise UnboundPlaceholder(f"{template.template_id}: unbound {missing}")
    text = _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
    logger.debug("rendered %s digest=%s", template.template_id, digest(text)[:12])
    return text


class MockFixtureStore:
    """Digest -> canned response map, persisted as a single JSON object."""

    def __init__(self, responses: Mapping[str, str] | None = None, strict: bool = True,
                 default: str = ""):
        self.responses: dict[str, str] = dict(responses or {})
        self.strict = strict
        self.default = default

    def add(self, prompt: str, response: str, round_index: int = 0,
            attachment: str | None = None) -> str:
        key = digest(prompt, round_index, attachment)
        self.responses[key] = response
        return key

    def lookup(self, key: str) -> str:
        if key in self.responses:
            return self.responses[key]
        if self.strict:
            raise FixtureMiss(f"no fixture for digest {key}")
        return self.default

    @classmethod
    def load(cls, path: str | Path, strict: bool = True, default: str = "") -> "MockFixtureStore":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
            raise ValueError(f"{path}: fixture store must map digests to strings")
        return cls(data, strict=strict, default=default)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.responses, indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def from_audit(cls, audit_path: str | Path, strict: bool = True) -> "MockFixtureStore":
        """Harvest fixtures from a JSON Lines audit log written by a client."""
        store = cls(strict=strict)
        with open(audit_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    store.responses[rec["digest"]] = rec["response"]
        return store


@dataclass(frozen=True)
class ChatReply:
    text: str
    retries: int
    digest: str


Responder = Callable[[str, int, "str | None"], str]


@dataclass(frozen=True)
class ChatClient:
    """Immutable client configuration; safe to share across threads.

    ``backend`` is ``"http"`` or ``"mock"``. A mock client answers from
    ``fixtures``, from ``responder`` when given, or echoes the prompt when
    ``echo`` is set.
    """

    backend: str = "mock"
    model_name: str = "mock"
    endpoint: str | None = None
    temperature: float = 0.1
    max_retries: int = 3
    timeout: float = 30.0
    backoff: float = 0.5
    max_concurrency: int = 4
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    fixtures: MockFixtureStore | None = None
    responder: Responder | None = None
    echo: bool = False
    audit_path: str | None = None
    _sem: threading.BoundedSemaphore = field(init=False, repr=False, compare=False)
    _audit_lock: threading.Lock = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.backend not in ("http", "mock"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.backend == "http" and not self.endpoint:
            raise ValueError("http backend needs an endpoint")
        object.__setattr__(self, "_sem", threading.BoundedSemaphore(self.max_concurrency))
        object.__setattr__(self, "_audit_lock", threading.Lock())

    def chat(self, prompt: str, round_index: int = 0, attachment: str | None = None) -> str:
        return self.complete(prompt, round_index, attachment).text

    def complete(self, prompt: str, round_index: int = 0,
                 attachment: str | None = None) -> ChatReply:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = digest(prompt, round_index, attachment)
        with self._sem:
            if self.backend == "mock":
                reply = ChatReply(self._mock(prompt, round_index, attachment, key), 0, key)
            else:
                text, retries = self._http(prompt, attachment)
                reply = ChatReply(text, retries, key)
        self._audit(prompt, round_index, attachment, reply)
        return reply

    def _mock(self, prompt, round_index, attachment, key) -> str:
        if self.responder is not None:
            return self.responder(prompt, round_index, attachment)
        if self.echo:
            return prompt
        if self.fixtures is None:
            raise FixtureMiss("mock client has no fixture store")
        return self.fixtures.lookup(key)

    def request_body(self, prompt: str, attachment: str | None = None) -> dict:
        message = {"role": "user", "content": prompt}
        if attachment:
            message["image"] = attachment
        return {"model": self.model_name, "temperature": self.temperature, "messages": [message]}

    def _http(self, prompt: str, attachment: str | None) -> tuple[str, int]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers[self.auth_header] = f"{self.auth_scheme} {key}".strip()
        body = self.request_body(prompt, attachment)
        retries = 0
        while True:
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            except httpx.TimeoutException as exc:
                err: ClientError = Timeout(str(exc) or "request timed out", retries)
            except httpx.TransportError as exc:
                err = ClientError(f"transport error: {exc}", retries)
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"HTTP {resp.status_code}", retries)
                if resp.status_code == 429:
                    err = RateLimited("HTTP 429", retries)
                elif resp.status_code >= 500:
                    err = ClientError(f"HTTP {resp.status_code}", retries)
                elif resp.status_code >= 400:
                    raise ClientError(f"HTTP {resp.status_code}: {resp.text[:200]}", retries)
                else:
                    return _response_text(resp.json()), retries
            if retries >= self.max_retries:
                raise err
            time.sleep(self.backoff * (2 ** retries))
            retries += 1

    def _audit(self, prompt, round_index, attachment, reply: ChatReply) -> None:
        if not self.audit_path:
            return
        rec = {"digest": reply.digest, "round": round_index, "attachment": attachment,
               "prompt": prompt, "response": reply.text, "retries": reply.retries,
               "model": self.model_name}
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _response_text(payload: dict) -> str:
    """Pull the reply text out of OpenAI-style or Qianfan-style bodies."""
    if "choices" in payload:
        msg = payload["choices"][0].get("message") or {}
        return msg.get("content") or payload["choices"][0].get("text", "")
    if "result" in payload:
        return payload["result"]
    raise ClientError(f"unrecognised response body keys {sorted(payload)}")
