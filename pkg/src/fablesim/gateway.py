"""LLM gateway: chat providers, request digests, structured-output repair, logging.

Every exchange is logged as JSONL {digest, request, response, timestamp}. The
scripted provider replays fixture transcripts either in sequence or keyed by
request digest, which is what makes whole simulation runs reproducible.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULT_REPAIR_BUDGET = 2


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """The remote endpoint failed after exhausting retries."""


class FixtureExhaustedError(GatewayError):
    """A sequence-mode fixture transcript ran out of replies."""


class FixtureKeyError(GatewayError):
    """A keyed-mode fixture transcript has no reply for a request digest."""


class StructuredParseError(GatewayError):
    """No JSON object could be recovered within the repair budget."""


@dataclass(frozen=True)
class ChatRequest:
    system: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    max_tokens: int = 1024
    seed: int | None = None

    @classmethod
    def build(cls, system: str, user: str, **kwargs) -> ChatRequest:
        return cls(system=system, messages=(("user", user),), **kwargs)

    def with_reask(self, assistant_text: str, user_text: str) -> ChatRequest:
        extra = (("assistant", assistant_text), ("user", user_text))
        return replace(self, messages=self.messages + extra)

    def canonical(self) -> str:
        payload = {
            "system": self.system,
            "messages": [list(m) for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def request_digest(request: ChatRequest) -> str:
    """Stable identity of a request: sha256 over its canonical serialization."""
    return hashlib.sha256(request.canonical().encode("utf-8")).hexdigest()


@dataclass
class Completion:
    text: str
    model: str
    prompt_tokens: int
    completion_tokens: int
    digest: str


@dataclass
class ProviderConfig:
    kind: str  # "remote" or "scripted"
    base_url: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    transcript: str = ""  # fixture transcript path, scripted only

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_url": self.base_url,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "timeout": self.timeout,
            "retries": self.retries,
            "backoff": self.backoff,
            "transcript": self.transcript,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ProviderConfig:
        kind = data.get("kind", "")
        if kind not in ("remote", "scripted"):
            raise GatewayError(f"unknown provider kind {kind!r}")
        return cls(
            kind=kind,
            base_url=str(data.get("base_url", "")),
            model=str(data.get("model", "")),
            api_key_env=str(data.get("api_key_env", "")),
            timeout=float(data.get("timeout", 60.0)),
            retries=int(data.get("retries", 3)),
            backoff=float(data.get("backoff", 0.5)),
            transcript=str(data.get("transcript", "")),
        )


def load_provider_config(path: str | Path) -> ProviderConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise GatewayError(f"cannot load provider config {path}: {exc}")
    config = ProviderConfig.from_dict(data)
    # Transcript paths resolve relative to the config file.
    if config.transcript and not Path(config.transcript).is_absolute():
        config.transcript = str(path.parent / config.transcript)
    return config


class Provider:
    def complete(self, request: ChatRequest) -> Completion:
        raise NotImplementedError


class RemoteProvider(Provider):
    """Chat completions over HTTP with bearer auth and retry on 429/5xx."""

    RETRY_STATUSES = {429, 500, 502, 503, 504}

    def __init__(self, config: ProviderConfig) -> None:
        self.config = config

    def complete(self, request: ChatRequest) -> Completion:
        import requests

        url = f"{self.config.base_url.rstrip('/')}/chat/completions"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "") if self.config.api_key_env else ""
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body: dict = {
            "model": self.config.model,
            "messages": [{"role": "system", "content": request.system}]
            + [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed

        last_error: Exception | None = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(self.config.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.config.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in self.RETRY_STATUSES:
                last_error = TransportError(f"HTTP {resp.status_code}")
                logger.warning("chat request got HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            payload = resp.json()
            usage = payload.get("usage", {})
            return Completion(
                text=payload["choices"][0]["message"]["content"],
                model=payload.get("model", self.config.model),
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                digest=request_digest(request),
            )
        raise TransportError(f"chat request failed after {self.config.retries + 1} attempts: {last_error}")


class ScriptedProvider(Provider):
    """Replays a fixture transcript; sequence mode is FIFO, keyed mode looks up digests."""

    def __init__(self, mode: str, replies) -> None:
        if mode not in ("sequence", "keyed"):
            raise GatewayError(f"unknown scripted mode {mode!r}")
        self.mode = mode
        self._lock = threading.Lock()
        if mode == "sequence":
            self._queue: list[str] = [str(r) for r in replies]
            self._cursor = 0
        else:
            self._keyed: dict[str, list[str] | str] = {}
            for digest, value in dict(replies).items():
                self._keyed[digest] = [str(v) for v in value] if isinstance(value, list) else str(value)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedProvider:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise GatewayError(f"cannot load fixture transcript {path}: {exc}")
        mode = data.get("mode", "sequence")
        return cls(mode=mode, replies=data.get("replies", [] if mode == "sequence" else {}))

    def skip(self, n: int) -> None:
        """Fast-forward a sequence transcript (used when resuming a checkpoint)."""
        if self.mode == "sequence":
            with self._lock:
                self._cursor += n

    def complete(self, request: ChatRequest) -> Completion:
        digest = request_digest(request)
        with self._lock:
            if self.mode == "sequence":
                if self._cursor >= len(self._queue):
                    raise FixtureExhaustedError(f"fixture transcript exhausted after {self._cursor} replies")
                text = self._queue[self._cursor]
                self._cursor += 1
            else:
                if digest not in self._keyed:
                    raise FixtureKeyError(f"no fixture reply for digest {digest[:12]}…")
                value = self._keyed[digest]
                if isinstance(value, list):
                    if not value:
                        raise FixtureExhaustedError(f"fixture replies for digest {digest[:12]}… exhausted")
                    text = value.pop(0)
                else:
                    text = value
        return Completion(text=text, model="scripted", prompt_tokens=0, completion_tokens=0, digest=digest)


def build_provider(config: ProviderConfig) -> Provider:
    if config.kind == "remote":
        return RemoteProvider(config)
    if config.kind == "scripted":
        if not config.transcript:
            raise GatewayError("scripted provider needs a fixture transcript path")
        return ScriptedProvider.from_file(config.transcript)
    raise GatewayError(f"unknown provider kind {config.kind!r}")


def _strip_code_fences(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith("```"):
        first_newline = stripped.find("\n")
        if first_newline != -1 and stripped.rstrip().endswith("```"):
            return stripped[first_newline + 1 :].rstrip()[:-3].strip()
    return stripped


def _first_balanced_object(text: str) -> str:
    start = text.find("{")
    if start == -1:
        raise StructuredParseError("no JSON object found in reply")
    depth = 0
    in_string: str | None = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == in_string:
                in_string = None
            continue
        if ch in "\"'":
            in_string = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    raise StructuredParseError("unbalanced braces in reply")


def parse_structured(text: str) -> dict:
    """Recover a JSON object from a model reply.

    Ladder: strip code fences, isolate the first balanced {...}, parse as JSON,
    then fall back to a Python-literal parse for single-quoted pseudo-JSON.
    """
    candidate = _first_balanced_object(_strip_code_fences(text))
    try:
        obj = json.loads(candidate)
    except json.JSONDecodeError:
        try:
            obj = ast.literal_eval(candidate)
        except (ValueError, SyntaxError) as exc:
            raise StructuredParseError(f"reply is not parsable JSON: {exc}")
    if not isinstance(obj, dict):
        raise StructuredParseError(f"expected a JSON object, got {type(obj).__name__}")
    return obj


class Gateway:
    """Provider wrapper that logs every exchange and repairs structured replies."""

    def __init__(
        self,
        provider: Provider,
        transcript_path: str | Path | None = None,
        repair_budget: int = DEFAULT_REPAIR_BUDGET,
    ) -> None:
        self.provider = provider
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.repair_budget = repair_budget
        self.log: list[dict] = []
        self.calls = 0

    def complete(self, request: ChatRequest) -> Completion:
        completion = self.provider.complete(request)
        self.calls += 1
        entry = {
            "digest": completion.digest,
            "request": json.loads(request.canonical()),
            "response": completion.text,
            "timestamp": time.time(),
        }
        self.log.append(entry)
        if self.transcript_path:
            with self.transcript_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return completion

    def complete_text(self, request: ChatRequest) -> str:
        return self.complete(request).text.strip()

    def complete_structured(self, request: ChatRequest, required_keys: list[str]) -> dict:
        """Structured completion with repair and up to `repair_budget` re-asks."""
        current = request
        last_error: StructuredParseError | None = None
        for _ in range(self.repair_budget + 1):
            completion = self.complete(current)
            try:
                obj = parse_structured(completion.text)
                missing = [k for k in required_keys if k not in obj]
                if missing:
                    raise StructuredParseError(f"reply is missing keys: {missing}")
                return obj
            except StructuredParseError as exc:
                last_error = exc
                current = current.with_reask(
                    completion.text,
                    f"That reply could not be used: {exc}. "
                    f"Answer again with exactly one JSON object using double quotes, "
                    f"containing the keys: {', '.join(required_keys)}.",
                )
        raise StructuredParseError(f"no valid JSON object within {self.repair_budget + 1} attempts: {last_error}")
