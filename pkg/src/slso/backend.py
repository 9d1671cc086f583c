"""Vision-language completion backends.

Two interchangeable implementations of ``send(VisionRequest) -> VisionResponse``:
a remote client speaking the OpenAI-compatible chat-completions protocol, and
a scripted mock that replays canned responses keyed by (step kind, call index)
for deterministic desk-scale runs and fault injection.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import requests

from .schema import strip_code_fences

DEFAULT_MODEL_ID = "gpt-4o-2024-11-20"
DEFAULT_IMAGE_CAP_BYTES = 20 * 1024 * 1024
API_KEY_ENV = "SLSO_API_KEY"


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Network failure or non-retryable HTTP error."""


class AuthError(BackendError):
    """Missing or rejected credential; never retried."""


class RateLimited(BackendError):
    """HTTP 429 persisted across all retry attempts."""


class EmptyResponse(BackendError):
    """Backend returned no usable text."""


class ScriptExhausted(BackendError):
    """Mock script has no response for the requested step and call index."""


class OversizedImage(BackendError):
    """Image payload exceeds the configured size cap."""


@dataclass(frozen=True)
class DecodingParams:
    """Decoding parameters; defaults pin the low-temperature configuration."""

    temperature: float = 0.2
    top_p: float = 1.0
    max_tokens: int = 2048
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "frequency_penalty": self.frequency_penalty,
            "presence_penalty": self.presence_penalty,
        }


@dataclass(frozen=True)
class VisionRequest:
    """One completion request; the image, when present, travels Base64-encoded."""

    step_kind: str
    system_text: str
    user_text: str
    image: bytes | None = None
    image_media_type: str = "image/png"
    params: DecodingParams = DecodingParams()
    response_schema: dict | None = None  # None means free-text response


@dataclass(frozen=True)
class VisionResponse:
    """Model text plus informational backend metadata."""

    text: str
    request_id: str = ""
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


def build_wire_request(
    request: VisionRequest,
    model_id: str = DEFAULT_MODEL_ID,
    max_image_bytes: int = DEFAULT_IMAGE_CAP_BYTES,
) -> dict:
    """Build the chat-completions JSON body for a request.

    The body is a pure function of its inputs (the credential travels in the
    authorization header, not here), so identical requests produce identical
    bytes.  Raises :class:`OversizedImage` when the payload exceeds the cap.
    """
    content: list[dict] = [{"type": "text", "text": request.user_text}]
    if request.image is not None:
        if len(request.image) > max_image_bytes:
            raise OversizedImage(
                f"image is {len(request.image)} bytes, cap is {max_image_bytes}"
            )
        payload = base64.b64encode(request.image).decode("ascii")
        content.append(
            {
                "type": "image_url",
                "image_url": {
                    "url": f"data:{request.image_media_type};base64,{payload}"
                },
            }
        )
    body: dict = {
        "model": model_id,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": content},
        ],
        **request.params.to_dict(),
    }
    if request.response_schema is not None:
        body["response_format"] = {
            "type": "json_schema",
            "json_schema": {
                "name": "cyst_structured_data",
                "schema": request.response_schema,
                "strict": True,
            },
        }
    return body


class RemoteBackend:
    """OpenAI-compatible HTTP client with bounded retries.

    Transport failures, HTTP 429 and 5xx are retried up to ``max_attempts``
    with exponential backoff; authentication failures and other 4xx statuses
    are raised immediately.  The credential is read from ``SLSO_API_KEY``.
    """

    def __init__(
        self,
        endpoint: str,
        model_id: str = DEFAULT_MODEL_ID,
        *,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        max_image_bytes: int = DEFAULT_IMAGE_CAP_BYTES,
        session=None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.max_image_bytes = max_image_bytes
        self._session = session if session is not None else requests.Session()

    def send(self, request: VisionRequest) -> VisionResponse:
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise AuthError(f"{API_KEY_ENV} is not set")
        body = build_wire_request(request, self.model_id, self.max_image_bytes)
        headers = {"Authorization": f"Bearer {key}"}

        last_error: BackendError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = TransportError(str(exc))
            else:
                status = response.status_code
                if status == 200:
                    return self._parse_response(response)
                if status in (401, 403):
                    raise AuthError(f"HTTP {status}: authentication rejected")
                if status == 429:
                    last_error = RateLimited(f"HTTP 429 after {attempt} attempt(s)")
                elif 500 <= status < 600:
                    last_error = TransportError(f"HTTP {status}")
                else:
                    raise TransportError(f"HTTP {status}: non-retryable")
            if attempt < self.max_attempts:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
        assert last_error is not None
        raise last_error

    @staticmethod
    def _parse_response(response) -> VisionResponse:
        try:
            document = response.json()
            text = document["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise TransportError(f"malformed response body: {exc}") from exc
        if not text or not str(text).strip():
            raise EmptyResponse("backend returned empty text")
        usage = document.get("usage") or {}
        return VisionResponse(
            text=str(text),
            request_id=str(document.get("id", "")),
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


@dataclass(frozen=True)
class OmitTeethFault:
    """Drop the named teeth from the first ``first_k`` responses of a step.

    JSON responses lose the teeth from ``affected_teeth``; plain token lists
    lose the matching tokens.  Keyed by step kind, so the same plan can
    corrupt either the structured generations or the extractions.
    """

    step: str
    teeth: tuple[str, ...]
    first_k: int

    def apply(self, text: str) -> str:
        try:
            document = json.loads(strip_code_fences(text))
        except (ValueError, TypeError):
            document = None
        if isinstance(document, dict) and isinstance(document.get("affected_teeth"), list):
            document["affected_teeth"] = [
                item
                for item in document["affected_teeth"]
                if str(item).lstrip("#") not in self.teeth
            ]
            return json.dumps(document, indent=2)
        kept = [
            token.strip()
            for token in text.split(",")
            if token.strip() and token.strip().lstrip("#") not in self.teeth
        ]
        return ", ".join(kept)


class MockScript:
    """Ordered canned responses per step kind, with an optional fault plan.

    A step's responses may be a list (strict: running past the end raises
    :class:`ScriptExhausted`) or a single string replayed for every call.
    """

    def __init__(
        self,
        steps: Mapping[str, list[str] | str],
        faults: Iterable[OmitTeethFault] = (),
    ):
        self._steps: dict[str, list[str] | str] = {
            kind: value if isinstance(value, str) else list(value)
            for kind, value in steps.items()
        }
        self._faults = tuple(faults)

    @classmethod
    def from_dict(cls, document: Mapping) -> "MockScript":
        steps = document.get("steps", document)
        faults = [
            OmitTeethFault(
                step=spec["step"],
                teeth=tuple(str(tooth) for tooth in spec["teeth"]),
                first_k=int(spec["first_k"]),
            )
            for spec in document.get("faults", [])
            if spec.get("kind", "omit_teeth") == "omit_teeth"
        ]
        return cls({k: v for k, v in steps.items() if k != "faults"}, faults)

    @classmethod
    def from_transcript(cls, entries: Iterable) -> "MockScript":
        """Rebuild a script from recorded raw responses, enabling replay."""
        steps: dict[str, list[str]] = {}
        for entry in entries:
            raw = getattr(entry, "raw_response", None)
            if raw is None:
                continue
            steps.setdefault(getattr(entry, "step_kind"), []).append(raw)
        return cls(steps)

    def response_for(self, step_kind: str, index: int) -> str:
        scripted = self._steps.get(step_kind)
        if scripted is None:
            raise ScriptExhausted(f"no script for step {step_kind!r}")
        if isinstance(scripted, str):
            text = scripted
        else:
            if index >= len(scripted):
                raise ScriptExhausted(
                    f"script for {step_kind!r} has {len(scripted)} response(s),"
                    f" call index {index} requested"
                )
            text = scripted[index]
        for fault in self._faults:
            if fault.step == step_kind and index < fault.first_k:
                text = fault.apply(text)
        return text


class MockBackend:
    """Deterministic scripted backend; cursor updates are serialized."""

    def __init__(self, script: MockScript):
        self._script = script
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()
        self.call_log: list[str] = []

    def send(self, request: VisionRequest) -> VisionResponse:
        with self._lock:
            index = self._cursors.get(request.step_kind, 0)
            self._cursors[request.step_kind] = index + 1
            self.call_log.append(request.step_kind)
        text = self._script.response_for(request.step_kind, index)
        return VisionResponse(text=text, request_id=f"mock-{request.step_kind}-{index}")


def load_script_file(path: str | Path) -> dict[str, MockScript]:
    """Load a per-case script file: ``{"cases": {case_id: script...}}``."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    cases = document.get("cases")
    if not isinstance(cases, dict):
        raise ValueError(f"{path}: expected a top-level 'cases' object")
    return {case_id: MockScript.from_dict(spec) for case_id, spec in cases.items()}
