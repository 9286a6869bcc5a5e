"""Chat-completions client used by the annotation pipeline.

Three interchangeable implementations behind one ``complete(system, user)``
call: a real HTTP client (OpenAI-style /chat/completions), an in-process
stub for offline generation and tests, and a transcript replayer that makes
recorded annotation runs reproducible without any service. A recorder wraps
any client and captures (prompt, response) pairs keyed by a stable hash, so
a run against a live service can be replayed byte-identically later.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

import requests

from .errors import ClientRejection, ClientTimeout, ReplayMiss
from .records import canonical_json, env_override, read_jsonl, stable_hash


@dataclass
class ChatClientConfig:
    base_url: str = "http://localhost:8080/v1"
    model: str = "annotator"
    api_key: str = ""
    timeout_s: float = 30.0
    max_retries: int = 2
    retry_backoff_s: float = 0.5
    temperature: float = 0.0

    def resolved_api_key(self) -> str:
        return env_override("CHAT_API_KEY", self.api_key)


class ChatClient(Protocol):
    def complete(self, system: str, user: str) -> str: ...


def prompt_key(system: str, user: str) -> str:
    return stable_hash(canonical_json({"system": system, "user": user}))


class HttpChatClient:
    """Minimal chat-completions caller with bounded retries.

    Retries cover timeouts, connection failures, and 5xx responses with
    exponential backoff; 4xx responses are the service refusing the request
    and surface immediately as ClientRejection.
    """

    def __init__(self, config: ChatClientConfig, session: Any | None = None):
        self.config = config
        self.session = session or requests.Session()

    def complete(self, system: str, user: str) -> str:
        cfg = self.config
        payload = {
            "model": cfg.model,
            "temperature": cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        headers = {"Content-Type": "application/json"}
        key = cfg.resolved_api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = cfg.base_url.rstrip("/") + "/chat/completions"

        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt > 0:
                time.sleep(cfg.retry_backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self.session.post(
                    url, json=payload, headers=headers, timeout=cfg.timeout_s
                )
            except (requests.Timeout, requests.ConnectionError) as e:
                last_error = e
                continue
            if 400 <= resp.status_code < 500:
                raise ClientRejection(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code != 200:
                last_error = ClientRejection(f"HTTP {resp.status_code}")
                continue
            return _parse_completion(resp)
        if isinstance(last_error, ClientRejection):
            raise last_error
        raise ClientTimeout(
            f"no response after {cfg.max_retries + 1} attempts: {last_error}"
        )


def _parse_completion(resp: Any) -> str:
    try:
        data = resp.json()
    except ValueError as e:
        raise ClientRejection(f"non-JSON response: {e}") from e
    try:
        choice = data["choices"][0]
    except (KeyError, IndexError, TypeError) as e:
        raise ClientRejection(f"malformed completion payload: {data!r:.200}") from e
    if isinstance(choice, dict):
        message = choice.get("message")
        if isinstance(message, dict) and isinstance(message.get("content"), str):
            return message["content"]
        if isinstance(choice.get("text"), str):
            return choice["text"]
    raise ClientRejection(f"completion has no content: {choice!r:.200}")


class StubChatClient:
    """In-process client: a pure handler function plays the annotator."""

    def __init__(self, handler: Callable[[str, str], str]):
        self.handler = handler
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        return self.handler(system, user)


class TranscriptRecorder:
    """Wraps a client; appends every exchange to a JSONL transcript."""

    def __init__(self, inner: ChatClient, path: Path):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def complete(self, system: str, user: str) -> str:
        response = self.inner.complete(system, user)
        row = {
            "key": prompt_key(system, user),
            "system": system,
            "user": user,
            "response": response,
        }
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonical_json(row) + "\n")
        return response


class TranscriptReplayer:
    """Serves recorded responses; unknown prompts raise ReplayMiss."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.responses: dict[str, str] = {}
        for row in read_jsonl(self.path):
            self.responses.setdefault(row["key"], row["response"])

    def complete(self, system: str, user: str) -> str:
        key = prompt_key(system, user)
        if key not in self.responses:
            raise ReplayMiss(
                f"no recorded response for prompt key {key} (user: {user[:80]!r})"
            )
        return self.responses[key]
