"""Chat clients for the annotation pipeline.

One interface, two implementations: a live client speaking the
OpenAI-compatible chat-completions protocol, and a scripted mock that replays
canned responses keyed by (stage, trace_id, call_index). Both are
interchangeable anywhere the pipeline needs a scorer, compressor or judge.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol


class ClientError(Exception):
    """Transport failure or scripted response missing, after retries."""


class ChatClient(Protocol):
    def complete(
        self,
        system: str,
        user: str,
        *,
        stage: str,
        trace_id: str,
        call_index: int,
    ) -> str:
        """Return the assistant message text for one call."""
        ...


class MockClient:
    """Replays scripted responses from a JSONL file or an in-memory list.

    Script rows: {"stage": ..., "trace_id": ..., "call_index": ..., "response_text": ...}.
    A missing key is a ClientError, which is how scripted failures are staged.
    """

    def __init__(self, script: list[dict] | None = None):
        self._responses: dict[tuple[str, str, int], str] = {}
        self.calls: list[tuple[str, str, int]] = []
        for row in script or []:
            self.add(row["stage"], row["trace_id"], int(row["call_index"]), row["response_text"])

    @classmethod
    def from_file(cls, path: str | Path) -> "MockClient":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        return cls(rows)

    def add(self, stage: str, trace_id: str, call_index: int, response_text: str) -> None:
        self._responses[(stage, trace_id, call_index)] = response_text

    def complete(self, system: str, user: str, *, stage: str, trace_id: str, call_index: int) -> str:
        key = (stage, trace_id, call_index)
        self.calls.append(key)
        if key not in self._responses:
            raise ClientError(f"no scripted response for stage={stage} trace={trace_id} call={call_index}")
        return self._responses[key]


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 8
    temperature: float = 0.0
    audit_path: str | Path | None = None


class OpenAICompatClient:
    """POSTs to ``{base_url}/chat/completions`` with exponential backoff.

    Concurrency is bounded by a semaphore; every request/response pair is
    appended to the audit log (the auth token is never written).
    """

    def __init__(self, config: EndpointConfig):
        self.config = config
        self._sem = threading.Semaphore(config.max_in_flight)
        self._audit_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _audit(self, record: dict) -> None:
        if self.config.audit_path is None:
            return
        with self._audit_lock:
            with open(self.config.audit_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def complete(self, system: str, user: str, *, stage: str, trace_id: str, call_index: int) -> str:
        import requests

        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                with self._sem:
                    resp = requests.post(
                        url, json=payload, headers=self._headers(), timeout=self.config.timeout
                    )
                resp.raise_for_status()
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
                self._audit(
                    {
                        "ts": time.time(),
                        "stage": stage,
                        "trace_id": trace_id,
                        "call_index": call_index,
                        "attempt": attempt,
                        "request": payload,
                        "response": text,
                    }
                )
                return text
            except Exception as e:  # transport, HTTP status, or body shape
                last_error = e
                self._audit(
                    {
                        "ts": time.time(),
                        "stage": stage,
                        "trace_id": trace_id,
                        "call_index": call_index,
                        "attempt": attempt,
                        "request": payload,
                        "error": str(e),
                    }
                )
                if attempt + 1 < self.config.max_retries:
                    time.sleep(2.0**attempt)
        raise ClientError(
            f"chat call failed after {self.config.max_retries} attempts: {last_error}"
        ) from last_error
