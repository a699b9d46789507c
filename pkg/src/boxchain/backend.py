"""Pluggable multimodal-model backends.

The pipeline only ever talks to a `Backend`: one `invoke(request)` call that
takes images plus an instruction and returns text with token accounting.
`MockBackend` replays scripted responses for offline, deterministic runs;
`RemoteBackend` speaks the common chat-with-images HTTP shape.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import re

from PIL import Image

from .errors import (
    BackendUnavailableError,
    CapabilityError,
    ConfigError,
    InputFormatError,
    ParameterError,
)
from .render import PromptedImage

DEFAULT_MAX_OUTPUT_TOKENS = 256
DEFAULT_TIMEOUT_S = 120.0
DEFAULT_MAX_IN_FLIGHT = 4
MAX_ATTEMPTS = 3
BACKOFF_BASE_S = 0.5

# Fallback token estimation when an endpoint reports no usage numbers:
# text tokens ~ ceil(utf-8 bytes / 4); image tokens from a tokens-per-tile table.
TEXT_BYTES_PER_TOKEN = 4
DEFAULT_TILE_PX = 512
DEFAULT_TOKENS_PER_TILE = 256


@dataclass(frozen=True)
class ModelRequest:
    """One model call: images + instruction. Decoding is pinned greedy."""

    images: tuple[Union[PromptedImage, bytes], ...]
    instruction: str
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if not self.images:
            raise ParameterError("request must carry at least one image")
        if self.temperature != 0.0:
            raise ParameterError("temperature is pinned to 0")
        if self.max_output_tokens <= 0:
            raise ParameterError("max_output_tokens must be positive")
        if not self.instruction:
            raise ParameterError("instruction must be non-empty")

    def image_bytes(self) -> list[bytes]:
        return [i.image_bytes if isinstance(i, PromptedImage) else i for i in self.images]


@dataclass(frozen=True)
class ModelResponse:
    text: str
    prompt_token_count: int
    output_token_count: int
    image_token_count: int
    estimated: bool = False

    def __post_init__(self) -> None:
        for name in ("prompt_token_count", "output_token_count", "image_token_count"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")


def image_fingerprint(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def estimate_text_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / TEXT_BYTES_PER_TOKEN)


def estimate_image_tokens(data: bytes, tile_px: int = DEFAULT_TILE_PX,
                          tokens_per_tile: int = DEFAULT_TOKENS_PER_TILE) -> int:
    with Image.open(io.BytesIO(data)) as img:
        w, h = img.size
    return math.ceil(w / tile_px) * math.ceil(h / tile_px) * tokens_per_tile


@dataclass(frozen=True)
class MatchRule:
    """One scripted-mock rule; first matching rule wins.

    `instruction_pattern` is a substring unless `regex` is set; the empty
    string and "*" match any instruction. `fingerprint` (hex sha256, prefixes
    allowed) restricts the rule to a specific image.
    """

    instruction_pattern: str
    response: str
    regex: bool = False
    fingerprint: Optional[str] = None

    def matches(self, instruction: str, fingerprints: Sequence[str]) -> bool:
        if self.fingerprint is not None:
            if not any(fp.startswith(self.fingerprint) for fp in fingerprints):
                return False
        if self.instruction_pattern in ("", "*"):
            return True
        if self.regex:
            return re.search(self.instruction_pattern, instruction) is not None
        return self.instruction_pattern in instruction

    def is_catch_all(self) -> bool:
        return self.fingerprint is None and self.instruction_pattern in ("", "*")


@dataclass(frozen=True)
class ScriptedBehavior:
    rules: tuple[MatchRule, ...]

    def __post_init__(self) -> None:
        if not any(r.is_catch_all() for r in self.rules):
            raise ConfigError("scripted behavior requires a catch-all rule")

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBehavior":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputFormatError(f"{path}: cannot parse behavior file: {exc}") from exc
        if not isinstance(payload, list):
            raise InputFormatError(f"{path}: expected a list of rules")
        rules = []
        for i, rec in enumerate(payload):
            if not isinstance(rec, dict) or "response" not in rec:
                raise InputFormatError(f"{path}: rule {i} must be an object with a response")
            rules.append(
                MatchRule(
                    instruction_pattern=str(rec.get("instruction_pattern", "*")),
                    response=str(rec["response"]),
                    regex=bool(rec.get("regex", False)),
                    fingerprint=rec.get("image_fingerprint"),
                )
            )
        return cls(tuple(rules))

    def respond(self, instruction: str, fingerprints: Sequence[str]) -> str:
        for rule in self.rules:
            if rule.matches(instruction, fingerprints):
                return rule.response
        raise AssertionError("catch-all rule guarantees a match")


@dataclass
class CallRecord:
    index: int
    instruction: str
    image_fingerprints: tuple[str, ...]
    response_text: str


class Backend:
    """Base class: wraps `_invoke` with a monotonically indexed call log."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._call_index = 0
        self.call_log: list[CallRecord] = []

    def invoke(self, request: ModelRequest) -> ModelResponse:
        response = self._invoke(request)
        with self._lock:
            self._call_index += 1
            self.call_log.append(
                CallRecord(
                    index=self._call_index,
                    instruction=request.instruction,
                    image_fingerprints=tuple(image_fingerprint(b) for b in request.image_bytes()),
                    response_text=response.text,
                )
            )
        return response

    def _invoke(self, request: ModelRequest) -> ModelResponse:
        raise NotImplementedError


class MockBackend(Backend):
    """Deterministic scripted backend for desk-scale runs and tests."""

    def __init__(self, behavior: ScriptedBehavior, tile_px: int = DEFAULT_TILE_PX,
                 tokens_per_tile: int = DEFAULT_TOKENS_PER_TILE) -> None:
        super().__init__()
        self.behavior = behavior
        self.tile_px = tile_px
        self.tokens_per_tile = tokens_per_tile

    def _invoke(self, request: ModelRequest) -> ModelResponse:
        payloads = request.image_bytes()
        fingerprints = [image_fingerprint(b) for b in payloads]
        text = self.behavior.respond(request.instruction, fingerprints)
        return ModelResponse(
            text=text,
            prompt_token_count=estimate_text_tokens(request.instruction),
            output_token_count=estimate_text_tokens(text),
            image_token_count=sum(
                estimate_image_tokens(b, self.tile_px, self.tokens_per_tile) for b in payloads
            ),
            estimated=True,
        )


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    model: str
    api_key_env: str = "BOXCHAIN_API_KEY"
    timeout_s: float = DEFAULT_TIMEOUT_S
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    tile_px: int = DEFAULT_TILE_PX
    tokens_per_tile: int = DEFAULT_TOKENS_PER_TILE


class RemoteBackend(Backend):
    """HTTP client for chat-with-images endpoints.

    Request body: {model, temperature, max_tokens, messages:[{role: "user",
    content:[{type: "text", text}, {type: "image_url", image_url: {url:
    "data:image/png;base64,..."}}]}]}. Transient failures are retried with
    exponential backoff, at most MAX_ATTEMPTS total attempts.
    """

    def __init__(self, config: RemoteConfig) -> None:
        super().__init__()
        self.config = config
        self._inflight = threading.Semaphore(config.max_in_flight)

    def _payload(self, request: ModelRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.instruction}]
        for data in request.image_bytes():
            b64 = base64.b64encode(data).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
            )
        return {
            "model": self.config.model,
            "temperature": 0,
            "max_tokens": request.max_output_tokens,
            "messages": [{"role": "user", "content": content}],
        }

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _invoke(self, request: ModelRequest) -> ModelResponse:
        import requests

        payload = self._payload(request)
        last_error: Exception | None = None
        with self._inflight:
            for attempt in range(MAX_ATTEMPTS):
                if attempt:
                    time.sleep(BACKOFF_BASE_S * 2 ** (attempt - 1))
                try:
                    resp = requests.post(
                        self.config.endpoint,
                        json=payload,
                        headers=self._headers(),
                        timeout=self.config.timeout_s,
                    )
                except requests.RequestException as exc:
                    last_error = exc
                    continue
                if resp.status_code in (400, 413, 415, 422):
                    raise CapabilityError(
                        f"endpoint refused the payload ({resp.status_code}): {resp.text[:400]}"
                    )
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_error = BackendUnavailableError(
                        f"endpoint returned {resp.status_code}"
                    )
                    continue
                if resp.status_code != 200:
                    raise BackendUnavailableError(
                        f"endpoint returned {resp.status_code}: {resp.text[:400]}"
                    )
                return self._parse_response(resp.json(), request)
        raise BackendUnavailableError(
            f"backend unavailable after {MAX_ATTEMPTS} attempts: {last_error}"
        )

    def _parse_response(self, body: dict, request: ModelRequest) -> ModelResponse:
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailableError(f"malformed endpoint response: {exc}") from exc
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return ModelResponse(
                text=text,
                prompt_token_count=int(usage["prompt_tokens"]),
                output_token_count=int(usage["completion_tokens"]),
                image_token_count=int(usage.get("image_tokens", 0)),
                estimated=False,
            )
        return ModelResponse(
            text=text,
            prompt_token_count=estimate_text_tokens(request.instruction),
            output_token_count=estimate_text_tokens(text),
            image_token_count=sum(
                estimate_image_tokens(b, self.config.tile_px, self.config.tokens_per_tile)
                for b in request.image_bytes()
            ),
            estimated=True,
        )
