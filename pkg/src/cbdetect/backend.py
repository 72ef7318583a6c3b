"""Model inference behind one classification interface.

Three backend kinds share the ``classify`` entry point:

* ``stub`` — a deterministic rule table, for desk-scale end-to-end tests.
  Rules match against the post content by default (prompts enumerate every
  class name in their instructions, so scanning the whole prompt would be
  ambiguous).
* ``live_endpoint`` — a chat-completion-style HTTP endpoint with bounded
  retries. Credentials come from the environment, never from config files.
* ``toy_checkpoint`` — a trained toy-network checkpoint evaluated by head
  argmax, so tuned-model experiments run without accelerators.

Free-text responses are mapped into a label space by a three-stage cascade:
exact display-name match, synonym-table match, earliest display-name
substring. Unparseable responses raise ``ParseFailure``; callers decide the
fallback policy.
"""

from __future__ import annotations

import enum
import json
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import requests

from .labels import Label, Task, label_space, labels_in_order
from .prompting import Prompt

ENDPOINT_ENV_VAR = "CBDETECT_ENDPOINT"
API_KEY_ENV_VAR = "CBDETECT_API_KEY"


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttemptRecord:
    number: int
    error: str
    elapsed: float


class TransportError(BackendError):
    """All retry attempts failed; carries the per-attempt log."""

    def __init__(self, message: str, attempts: tuple[AttemptRecord, ...]):
        super().__init__(message)
        self.attempts = attempts


class BackendTimeout(TransportError):
    """Retries exhausted and the final failure was a timeout."""


class ParseFailure(BackendError):
    """Model output maps to no label in the target label space."""

    def __init__(self, raw_text: str, label_space_name: str):
        super().__init__(f"response maps to no {label_space_name} label: {raw_text!r}")
        self.raw_text = raw_text


class BackendKind(enum.Enum):
    LIVE_ENDPOINT = "live_endpoint"
    STUB = "stub"
    TOY_CHECKPOINT = "toy_checkpoint"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (0.5, 1.0, 2.0)

    def delay_before(self, attempt_number: int) -> float:
        # attempt_number is 1-based; no delay before the first attempt
        if attempt_number <= 1 or not self.backoff:
            return 0.0
        return self.backoff[min(attempt_number - 2, len(self.backoff) - 1)]


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    kind: BackendKind
    model_name: str = ""
    endpoint_address: str = ""
    max_parallel_requests: int = 1
    timeout: float = 30.0
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    temperature: float = 0.0
    max_output_tokens: int = 64
    # stub-only
    stub_rules: tuple[tuple[str, str], ...] = ()
    default_response: str = ""
    fail_patterns: tuple[str, ...] = ()
    match_on: str = "post_text"  # or "rendered_text"
    # toy_checkpoint-only
    checkpoint_path: str = ""
    input_mode: str = "post_text"  # or "rendered_text"

    def __post_init__(self) -> None:
        if self.max_parallel_requests < 1:
            raise BackendError("max_parallel_requests must be >= 1")
        if self.timeout <= 0:
            raise BackendError("timeout must be > 0")
        if self.kind is BackendKind.STUB and not self.stub_rules:
            raise BackendError("stub backend needs a non-empty rule table")
        if self.match_on not in ("post_text", "rendered_text"):
            raise BackendError(f"bad match_on: {self.match_on!r}")
        if self.input_mode not in ("post_text", "rendered_text"):
            raise BackendError(f"bad input_mode: {self.input_mode!r}")

    def to_dict(self) -> dict:
        out = {
            "backend_id": self.backend_id,
            "kind": self.kind.value,
            "model_name": self.model_name,
            "max_parallel_requests": self.max_parallel_requests,
            "timeout": self.timeout,
            "retry_policy": {
                "max_attempts": self.retry_policy.max_attempts,
                "backoff": list(self.retry_policy.backoff),
            },
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }
        if self.kind is BackendKind.LIVE_ENDPOINT:
            out["endpoint_address"] = self.endpoint_address
        if self.kind is BackendKind.STUB:
            out["stub_rules"] = [list(rule) for rule in self.stub_rules]
            out["default_response"] = self.default_response
            out["fail_patterns"] = list(self.fail_patterns)
            out["match_on"] = self.match_on
        if self.kind is BackendKind.TOY_CHECKPOINT:
            out["checkpoint_path"] = self.checkpoint_path
            out["input_mode"] = self.input_mode
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendDescriptor":
        retry = data.get("retry_policy", {})
        return cls(
            backend_id=data["backend_id"],
            kind=BackendKind(data["kind"]),
            model_name=data.get("model_name", ""),
            endpoint_address=data.get("endpoint_address", ""),
            max_parallel_requests=int(data.get("max_parallel_requests", 1)),
            timeout=float(data.get("timeout", 30.0)),
            retry_policy=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                backoff=tuple(retry.get("backoff", (0.5, 1.0, 2.0))),
            ),
            temperature=float(data.get("temperature", 0.0)),
            max_output_tokens=int(data.get("max_output_tokens", 64)),
            stub_rules=tuple((p, r) for p, r in data.get("stub_rules", ())),
            default_response=data.get("default_response", ""),
            fail_patterns=tuple(data.get("fail_patterns", ())),
            match_on=data.get("match_on", "post_text"),
            checkpoint_path=data.get("checkpoint_path", ""),
            input_mode=data.get("input_mode", "post_text"),
        )


@dataclass(frozen=True)
class RawResponse:
    text: str
    latency: float
    backend_id: str
    truncated: bool = False


class MatchKind(enum.Enum):
    EXACT = "exact"
    SYNONYM = "synonym"
    SUBSTRING_FIRST = "substring_first"


@dataclass(frozen=True)
class ParsedLabel:
    label: Label
    match_kind: MatchKind
    raw: RawResponse


def make_stub(
    rule_table: Mapping[str, str] | Sequence[tuple[str, str]],
    backend_id: str = "stub",
    model_name: str = "rule-stub",
    default_response: str = "",
    fail_patterns: Sequence[str] = (),
    match_on: str = "post_text",
    max_parallel_requests: int = 1,
) -> BackendDescriptor:
    """Build a deterministic rule-based backend.

    Rules are priority-ordered: the first pattern found (case-insensitive
    substring) in the match target wins. An empty pattern matches anything.
    """
    if isinstance(rule_table, Mapping):
        rules = tuple(rule_table.items())
    else:
        rules = tuple(rule_table)
    return BackendDescriptor(
        backend_id=backend_id,
        kind=BackendKind.STUB,
        model_name=model_name,
        stub_rules=rules,
        default_response=default_response,
        fail_patterns=tuple(fail_patterns),
        match_on=match_on,
        max_parallel_requests=max_parallel_requests,
    )


def class_name_stub(task: Task, backend_id: str = "class-name-stub") -> BackendDescriptor:
    """Stub whose rules map each embedded class display name to itself."""
    rules = [(lab.display_name, lab.display_name) for lab in labels_in_order(task)]
    return make_stub(rules, backend_id=backend_id)


def constant_stub(response: str, backend_id: str = "constant-stub") -> BackendDescriptor:
    """Stub answering every prompt with the same response."""
    return make_stub([("", response)], backend_id=backend_id)


def classify(prompt: Prompt, descriptor: BackendDescriptor) -> RawResponse:
    """Send one prompt to a backend and return its raw text response."""
    if descriptor.kind is BackendKind.STUB:
        return _classify_stub(prompt, descriptor)
    if descriptor.kind is BackendKind.TOY_CHECKPOINT:
        return _classify_toy(prompt, descriptor)
    return _classify_live(prompt, descriptor)


def _classify_stub(prompt: Prompt, descriptor: BackendDescriptor) -> RawResponse:
    target = prompt.post_text if descriptor.match_on == "post_text" else prompt.rendered_text
    lowered = target.lower()
    for pattern in descriptor.fail_patterns:
        if pattern.lower() in lowered:
            attempt = AttemptRecord(number=1, error=f"injected failure on {pattern!r}", elapsed=0.0)
            raise TransportError("stub injected transport failure", (attempt,))
    for pattern, response in descriptor.stub_rules:
        if pattern.lower() in lowered:
            return RawResponse(text=response, latency=0.0, backend_id=descriptor.backend_id)
    return RawResponse(
        text=descriptor.default_response, latency=0.0, backend_id=descriptor.backend_id
    )


_TOY_CACHE: dict[str, object] = {}


def _classify_toy(prompt: Prompt, descriptor: BackendDescriptor) -> RawResponse:
    from .tuning import checkpoint as toy_checkpoint

    path = os.path.abspath(descriptor.checkpoint_path)
    classifier = _TOY_CACHE.get(path)
    if classifier is None:
        classifier = toy_checkpoint.load_classifier(path)
        _TOY_CACHE[path] = classifier
    task = _task_of_space(prompt.label_space)
    text = prompt.post_text if descriptor.input_mode == "post_text" else prompt.rendered_text
    started = time.perf_counter()
    label = classifier.predict(text, task)
    return RawResponse(
        text=label.display_name,
        latency=time.perf_counter() - started,
        backend_id=descriptor.backend_id,
    )


def _post_json(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    """Single HTTP POST; swapped out by tests via monkeypatching."""
    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    if response.status_code >= 400:
        raise requests.HTTPError(f"HTTP {response.status_code}: {response.text[:200]}")
    return response.json()


def _classify_live(prompt: Prompt, descriptor: BackendDescriptor) -> RawResponse:
    url = descriptor.endpoint_address or os.environ.get(ENDPOINT_ENV_VAR, "")
    if not url:
        raise BackendError(
            f"no endpoint address configured (set descriptor.endpoint_address "
            f"or the {ENDPOINT_ENV_VAR} environment variable)"
        )
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV_VAR, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": descriptor.model_name,
        "messages": [{"role": "user", "content": prompt.rendered_text}],
        "temperature": descriptor.temperature,
        "max_tokens": descriptor.max_output_tokens,
    }

    attempts: list[AttemptRecord] = []
    policy = descriptor.retry_policy
    last_was_timeout = False
    for number in range(1, policy.max_attempts + 1):
        delay = policy.delay_before(number)
        if delay:
            time.sleep(delay)
        started = time.perf_counter()
        try:
            body = _post_json(url, payload, headers, descriptor.timeout)
        except requests.Timeout as exc:
            last_was_timeout = True
            attempts.append(
                AttemptRecord(number=number, error=f"timeout: {exc}", elapsed=time.perf_counter() - started)
            )
            continue
        except requests.RequestException as exc:
            last_was_timeout = False
            attempts.append(
                AttemptRecord(number=number, error=str(exc), elapsed=time.perf_counter() - started)
            )
            continue
        elapsed = time.perf_counter() - started
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportError(
                f"malformed endpoint response: {json.dumps(body)[:200]}",
                tuple(attempts),
            ) from None
        truncated = choice.get("finish_reason") == "length"
        return RawResponse(
            text=text, latency=elapsed, backend_id=descriptor.backend_id, truncated=truncated
        )

    message = f"backend {descriptor.backend_id!r} failed after {policy.max_attempts} attempts"
    if last_was_timeout:
        raise BackendTimeout(message, tuple(attempts))
    raise TransportError(message, tuple(attempts))


def load_synonym_table(task: Task) -> dict[str, Label]:
    """Phrase -> label map from the shipped synonyms config."""
    ref = resources.files("cbdetect.data").joinpath("synonyms.json")
    data = json.loads(ref.read_text(encoding="utf-8"))
    space = label_space(task)
    table: dict[str, Label] = {}
    for member_name, phrases in data[task.value].items():
        lab = space[member_name]
        for phrase in phrases:
            table[phrase] = lab
    return table


def _task_of_space(space: type) -> Task:
    return Task.AGGRESSION if space.__name__ == "AggressionLabel" else Task.CYBERBULLYING


def parse_label(
    raw: RawResponse,
    space: type,
    synonym_table: Mapping[str, Label] | None = None,
) -> ParsedLabel:
    """Map a free-text response into a label space.

    Cascade, first hit wins:
      1. whole trimmed response equals a display name (case-insensitive);
      2. a synonym phrase occurs in the response (word-boundary,
         case-insensitive; earliest occurrence wins, ties to the longest
         phrase);
      3. earliest display-name occurrence as a substring.
    """
    members = list(space)
    if not members:
        raise BackendError("empty label space")
    text = raw.text
    trimmed = text.strip().lower()

    for lab in members:
        if trimmed == lab.display_name.lower():
            return ParsedLabel(label=lab, match_kind=MatchKind.EXACT, raw=raw)

    if synonym_table is None:
        synonym_table = load_synonym_table(_task_of_space(space))
    hits: list[tuple[int, int, int, Label]] = []
    for phrase, lab in synonym_table.items():
        match = re.search(rf"\b{re.escape(phrase)}\b", text, flags=re.IGNORECASE)
        if match:
            hits.append((match.start(), -len(phrase), int(lab), lab))
    if hits:
        hits.sort()
        return ParsedLabel(label=hits[0][3], match_kind=MatchKind.SYNONYM, raw=raw)

    lowered = text.lower()
    positional: list[tuple[int, int, Label]] = []
    for lab in members:
        pos = lowered.find(lab.display_name.lower())
        if pos >= 0:
            positional.append((pos, int(lab), lab))
    if positional:
        positional.sort()
        return ParsedLabel(label=positional[0][2], match_kind=MatchKind.SUBSTRING_FIRST, raw=raw)

    raise ParseFailure(text, space.__name__)
