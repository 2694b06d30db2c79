"""Chat-completion client and the prompt -> reply -> validate retry loop."""
from __future__ import annotations

import itertools
import json
import logging
import os
import threading
from dataclasses import replace
from pathlib import Path

import httpx

from .. import _io
from ..errors import (
    OntologyGenerationFailed,
    ProviderUnreachable,
    UnparseableReply,
)
from .core import Ontology, check_matches, load_fixture, validate_ontology
from .prompt import build_prompt, parse_reply

log = logging.getLogger(__name__)

API_KEY_ENV = "ECHO_LLM_API_KEY"
DEFAULT_MAX_RETRIES = 3


class ChatCompletionClient:
    """Minimal client for an OpenAI-style ``/chat/completions`` endpoint.

    Request and response bodies are written to ``log_dir`` when given; the
    API key is only ever sent as a header and never logged.
    """

    def __init__(self, url, model, api_key=None, log_dir=None, timeout=60.0,
                 temperature=0.0, transport=None):
        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.log_dir = Path(log_dir) if log_dir else None
        self.temperature = temperature
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def _log(self, request: dict, response) -> None:
        if self.log_dir is None:
            return
        with self._lock:
            n = next(self._counter)
        _io.atomic_write_json(self.log_dir / f"llm-{n:03d}.json",
                              {"url": self.url, "request": request, "response": response})

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(self.url, json=body, headers=headers)
        except httpx.HTTPError as exc:
            self._log(body, {"error": str(exc)})
            raise ProviderUnreachable(f"{self.url}: {exc}") from exc
        try:
            payload = resp.json()
        except ValueError:
            payload = {"raw": resp.text}
        self._log(body, {"status": resp.status_code, "body": payload})
        if resp.status_code >= 400:
            raise ProviderUnreachable(f"{self.url}: HTTP {resp.status_code}")
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            return json.dumps(payload)

    def close(self):
        self._client.close()


def generate_ontology(provider, labels, p: int, max_retries: int = DEFAULT_MAX_RETRIES, *,
                      dataset=None, fixture_only: bool = False) -> Ontology:
    """Ask ``provider`` for a ``p``-way grouping of ``labels``.

    ``provider`` is anything with ``complete(prompt) -> str``.  With
    ``fixture_only`` (or no provider) the frozen fixture for ``dataset`` is
    returned instead and nothing touches the network.  Each failed attempt
    feeds the validator's complaints into the next prompt.
    """
    labels = list(labels)
    if fixture_only or provider is None:
        if dataset is None:
            raise OntologyGenerationFailed("fixture mode needs a dataset kind")
        o = load_fixture(dataset, p)
        check_matches(o, labels)
        report = validate_ontology(o, labels)
        if not report.ok:
            raise OntologyGenerationFailed(
                f"fixture for {dataset} p={p} is invalid: " + "; ".join(map(str, report.violations)))
        return o

    feedback: list[str] = []
    for attempt in range(1, max_retries + 1):
        prompt = build_prompt(labels, p, feedback)
        raw = provider.complete(prompt.text)
        try:
            o = parse_reply(raw, labels, p)
        except UnparseableReply as exc:
            log.info("ontology attempt %d/%d rejected: %s", attempt, max_retries, exc.violations)
            feedback = exc.violations
            continue
        name = getattr(dataset, "value", dataset)
        return replace(o, dataset=name, meta={"attempts": attempt})
    raise OntologyGenerationFailed(
        f"no valid {p}-way grouping after {max_retries} attempts", attempts=max_retries)
