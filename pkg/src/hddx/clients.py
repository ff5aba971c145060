"""Embedding and chat-completion clients.

Remote adapters speak the common OpenAI-compatible wire shape behind the
two interfaces; the rest of the toolkit never inspects provider payloads.
Deterministic offline stubs make the full pipeline hermetic.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import zlib
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .errors import (
    ConfigurationError,
    InputError,
    MalformedResponseError,
    ScriptError,
    TransportError,
)

logger = logging.getLogger(__name__)

EMBED_URL_VAR = "HDDX_EMBED_URL"
EMBED_KEY_VAR = "HDDX_EMBED_KEY"
CHAT_URL_VAR = "HDDX_CHAT_URL"
CHAT_KEY_VAR = "HDDX_CHAT_KEY"


@dataclass
class InferenceConfig:
    """Generation settings; defaults follow the benchmark protocol."""

    temperature: float = 0.1
    max_tokens: int = 1024
    structured_output: bool = True
    extra: dict = field(default_factory=dict)  # provider-specific passthrough, e.g. reasoning_effort


@runtime_checkable
class Embedder(Protocol):
    identity: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@runtime_checkable
class ChatCompleter(Protocol):
    identity: str

    def complete(self, system: str, user: str, config: InferenceConfig) -> str: ...


class TrigramEmbedder:
    """Deterministic character-trigram hashing embedder.

    Identical strings always embed identically, so exact-string retrieval is
    provably rank-1. Vectors are signed-hash counts, L2-normalized.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise InputError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self.identity = f"stub-trigram-{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            if not text or not text.strip():
                raise InputError(f"empty text at position {i} in embedding batch")
            padded = f"  {text}  "
            for j in range(len(padded) - 2):
                h = zlib.crc32(padded[j : j + 3].encode("utf-8"))
                sign = 1.0 if (h >> 16) & 1 else -1.0
                vectors[i, h % self.dim] += sign
            norm = float(np.linalg.norm(vectors[i]))
            if norm == 0.0:
                vectors[i, 0] = 1.0
                norm = 1.0
            vectors[i] /= norm
        return vectors


class ScriptedChatCompleter:
    """Replays canned completions, keyed by exact (system, user) pairs or in
    fixed order. Unknown requests error; there is no silent default.
    """

    def __init__(
        self,
        responses: Mapping[tuple[str, str], str] | None = None,
        ordered: Sequence[str] | None = None,
        identity: str = "scripted",
    ):
        if (responses is None) == (ordered is None):
            raise InputError("provide exactly one of keyed responses or an ordered script")
        self._responses = dict(responses) if responses is not None else None
        self._ordered = list(ordered) if ordered is not None else None
        self._cursor = 0
        self.identity = identity
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str, config: InferenceConfig) -> str:
        self.calls.append((system, user))
        if self._responses is not None:
            key = (system, user)
            if key not in self._responses:
                raise ScriptError(
                    f"no scripted response for request system={system[:60]!r} user={user[:120]!r}"
                )
            return self._responses[key]
        assert self._ordered is not None
        if self._cursor >= len(self._ordered):
            raise ScriptError(f"ordered script exhausted after {len(self._ordered)} responses")
        reply = self._ordered[self._cursor]
        self._cursor += 1
        return reply

    @classmethod
    def from_file(cls, path: str | Path, identity: str = "scripted") -> "ScriptedChatCompleter":
        """Load a line-delimited JSON script. Records with system+user keys
        build an exact-match script; records with only a response field build
        an ordered one. The two styles cannot be mixed in one file.
        """
        keyed: dict[tuple[str, str], str] = {}
        ordered: list[str] = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise InputError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if "response" not in record:
                raise InputError(f"{path}: line {lineno}: record is missing the response field")
            if "system" in record or "user" in record:
                keyed[(record.get("system", ""), record.get("user", ""))] = record["response"]
            else:
                ordered.append(record["response"])
        if keyed and ordered:
            raise InputError(f"{path}: mixes keyed and ordered script records")
        if keyed:
            return cls(responses=keyed, identity=identity)
        return cls(ordered=ordered, identity=identity)


class RateLimiter:
    """Caps concurrent remote requests at a fixed budget. Shared across
    clients; acquire with `with limiter:`.
    """

    def __init__(self, budget: int):
        if budget < 1:
            raise InputError(f"rate-limit budget must be positive, got {budget}")
        self.budget = budget
        self._sem = threading.BoundedSemaphore(budget)

    def __enter__(self) -> "RateLimiter":
        self._sem.acquire()
        return self

    def __exit__(self, *exc) -> bool:
        self._sem.release()
        return False


def _require_env(var: str) -> str:
    value = os.environ.get(var, "").strip()
    if not value:
        raise ConfigurationError(f"environment variable {var} is not set")
    return value


def extract_json_object(text: str) -> dict:
    """Extract the first balanced-braces block that parses as a JSON object.

    Tolerates prose around the payload. Raises ValueError when no object is
    found; callers decide whether that means retry, fallback, or failure.
    """
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : i + 1])
                    except ValueError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    raise ValueError("no JSON object found in response")


class _RemoteClient:
    """Shared POST/retry/backoff plumbing for the two remote adapters."""

    def __init__(
        self,
        url: str,
        key: str,
        identity: str,
        attempts: int = 4,
        backoff: float = 0.5,
        timeout: float = 60.0,
        limiter: RateLimiter | None = None,
    ):
        if attempts < 1:
            raise InputError(f"attempts must be positive, got {attempts}")
        self.url = url
        self._key = key
        self.identity = identity
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.limiter = limiter

    def _post(self, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self._key}"}
        delay = self.backoff
        last_error: TransportError | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(delay)
                delay *= 2
            try:
                with self.limiter if self.limiter is not None else nullcontext():
                    response = httpx.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last_error = TransportError(f"transport failure calling {self.url}: {exc}")
                continue
            if response.status_code in (401, 403):
                raise ConfigurationError(f"authentication rejected by {self.url} ({response.status_code})")
            if response.status_code == 429 or response.status_code >= 500:
                last_error = TransportError(f"{self.url} returned status {response.status_code}")
                logger.warning("retryable status %d from %s (attempt %d/%d)",
                               response.status_code, self.url, attempt + 1, self.attempts)
                continue
            if response.status_code != 200:
                raise TransportError(f"{self.url} returned unexpected status {response.status_code}")
            if not response.content:
                raise MalformedResponseError(f"{self.url} returned an empty body")
            try:
                return response.json()
            except ValueError as exc:
                raise MalformedResponseError(f"{self.url} returned a non-JSON body: {exc}") from exc
        assert last_error is not None
        raise TransportError(f"gave up after {self.attempts} attempts: {last_error}")


class RemoteChatCompleter(_RemoteClient):
    """Chat-completions adapter configured from HDDX_CHAT_URL / HDDX_CHAT_KEY."""

    def __init__(self, model: str, attempts: int = 4, backoff: float = 0.5,
                 timeout: float = 60.0, limiter: RateLimiter | None = None):
        super().__init__(
            url=_require_env(CHAT_URL_VAR),
            key=_require_env(CHAT_KEY_VAR),
            identity=model,
            attempts=attempts,
            backoff=backoff,
            timeout=timeout,
            limiter=limiter,
        )

    def complete(self, system: str, user: str, config: InferenceConfig) -> str:
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": user})
        payload: dict = {
            "model": self.identity,
            "messages": messages,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if config.structured_output:
            payload["response_format"] = {"type": "json_object"}
        payload.update(config.extra)
        data = self._post(payload)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"chat response missing choices[0].message.content: {exc}") from exc
        if not isinstance(content, str) or not content:
            raise MalformedResponseError("chat response carried an empty completion")
        return content


class RemoteEmbedder(_RemoteClient):
    """Embeddings adapter configured from HDDX_EMBED_URL / HDDX_EMBED_KEY."""

    def __init__(self, model: str, attempts: int = 4, backoff: float = 0.5,
                 timeout: float = 60.0, limiter: RateLimiter | None = None):
        super().__init__(
            url=_require_env(EMBED_URL_VAR),
            key=_require_env(EMBED_KEY_VAR),
            identity=model,
            attempts=attempts,
            backoff=backoff,
            timeout=timeout,
            limiter=limiter,
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        for i, text in enumerate(texts):
            if not text or not text.strip():
                raise InputError(f"empty text at position {i} in embedding batch")
        data = self._post({"model": self.identity, "input": list(texts)})
        try:
            rows = [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise MalformedResponseError(f"embedding response missing data[*].embedding: {exc}") from exc
        if len(rows) != len(texts):
            raise MalformedResponseError(f"embedding response has {len(rows)} rows for {len(texts)} inputs")
        matrix = np.asarray(rows, dtype=np.float32)
        if matrix.ndim != 2:
            raise MalformedResponseError("embedding rows have inconsistent dimensions")
        return matrix
