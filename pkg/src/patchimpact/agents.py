"""Backend-agnostic completion access with deterministic decoding, structured
output parsing, and the progressive context augmentation loop.

Two backend realizations share one contract: a live HTTP chat-completion
client (which can record every exchange) and a replay backend that resolves
a canonical request digest to a stored response, making whole pipeline runs
bit-deterministic and offline.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Protocol

from .model import (
    CitedElement,
    ExtractRole,
    FieldStatus,
    ImpactJudgement,
    JudgementStatus,
    ModifiedEntity,
    SemanticExtract,
)

SCHEMA_VERSION = "1"
DEFAULT_MAX_OUTPUT_TOKENS = 2048
DEFAULT_PROMPT_TOKEN_CEILING = 24000


class AgentError(Exception):
    pass


class ReplayMiss(AgentError):
    def __init__(self, digest: str):
        super().__init__(f"no replay entry for digest {digest}")
        self.digest = digest


class TransportError(AgentError):
    pass


class PromptOverflow(AgentError):
    pass


class NoStructuredBlock(AgentError):
    pass


class MissingKeys(AgentError):
    def __init__(self, keys: list[str]):
        super().__init__(f"structured block missing keys: {', '.join(keys)}")
        self.keys = keys


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class CompletionRequest:
    """A deterministic-decoding completion request.

    ``agent_role``, ``schema_version`` and ``task_kind`` are request metadata:
    the first two feed the canonical digest, the last tags usage accounting.
    """

    messages: tuple[Message, ...]
    temperature: float = 0.0
    top_p: float = 1.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    agent_role: str = ""
    schema_version: str = SCHEMA_VERSION
    task_kind: str = ""

    def __post_init__(self) -> None:
        if self.temperature != 0.0 or self.top_p != 1.0:
            raise ValueError("decoding must stay deterministic: temperature=0, top_p=1.0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_output_tokens": self.max_output_tokens,
            "agent_role": self.agent_role,
            "schema_version": self.schema_version,
            "task_kind": self.task_kind,
        }


@dataclass(frozen=True)
class UsageRecord:
    task_kind: str  # defect_pattern_pr | defect_pattern_commit | impact_client
    input_tokens: int = 0
    output_tokens: int = 0
    wall_time: float = 0.0  # seconds

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_kind": self.task_kind,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "UsageRecord":
        return cls(
            task_kind=data["task_kind"],
            input_tokens=int(data.get("input_tokens", 0)),
            output_tokens=int(data.get("output_tokens", 0)),
            wall_time=float(data.get("wall_time", 0.0)),
        )


def estimate_tokens(text: str) -> int:
    """Cheap size proxy used for prompt budgeting (roughly 4 chars/token)."""
    return max(1, len(text) // 4)


def _normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def request_digest(request: CompletionRequest) -> str:
    """Canonical digest: role, schema version, and whitespace-collapsed texts."""
    payload = {
        "role": request.agent_role,
        "schema": request.schema_version,
        "messages": [[m.role, _normalize_text(m.content)] for m in request.messages],
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> tuple[str, UsageRecord]: ...


class ReplayBackend:
    """Resolves request digests against ``<store>/llm/<digest>.json`` files."""

    def __init__(self, store: str | Path):
        store = Path(store)
        self.store = store / "llm" if (store / "llm").is_dir() else store

    def complete(self, request: CompletionRequest) -> tuple[str, UsageRecord]:
        digest = request_digest(request)
        path = self.store / f"{digest}.json"
        if not path.exists():
            raise ReplayMiss(digest)
        data = json.loads(path.read_text(encoding="utf-8"))
        usage_data = dict(data.get("usage", {}))
        usage_data.setdefault("task_kind", request.task_kind)
        return data["response"], UsageRecord.from_dict(usage_data)


class LiveBackend:
    """HTTP chat-completion client with bounded retries.

    Works against any endpoint accepting the common ``/chat/completions``
    request body; the API key comes from the environment.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "PATCHIMPACT_LLM_KEY",
        session: Any | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        sleep=time.sleep,
    ):
        import os

        import requests

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.session = session or requests.Session()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._api_key = os.environ.get(api_key_env, "")

    def complete(self, request: CompletionRequest) -> tuple[str, UsageRecord]:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = f"{self.base_url}/chat/completions"
        attempt = 0
        started = time.monotonic()
        while True:
            try:
                response = self.session.post(url, json=body, headers=headers, timeout=120)
            except Exception as exc:
                if attempt >= self.max_retries:
                    raise TransportError(f"POST {url} failed: {exc}") from exc
                self._sleep(self.backoff_base * (2**attempt))
                attempt += 1
                continue
            if response.status_code in (429, 500, 502, 503, 504):
                if attempt >= self.max_retries:
                    raise TransportError(f"{url} -> {response.status_code} after retries")
                self._sleep(self.backoff_base * (2**attempt))
                attempt += 1
                continue
            if response.status_code == 413:
                raise PromptOverflow(f"{url} rejected request as too large")
            if response.status_code != 200:
                raise TransportError(f"{url} -> {response.status_code}")
            data = response.json()
            break
        text = data["choices"][0]["message"]["content"]
        usage = data.get("usage", {})
        return text, UsageRecord(
            task_kind=request.task_kind,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            wall_time=time.monotonic() - started,
        )


class CallableBackend:
    """In-process backend driven by a responder function.

    The responder receives the CompletionRequest and returns the response
    text; token counts are estimated. Used to seed replay stores and in
    tests.
    """

    def __init__(self, responder: Callable[[CompletionRequest], str]):
        self.responder = responder

    def complete(self, request: CompletionRequest) -> tuple[str, UsageRecord]:
        text = self.responder(request)
        prompt_text = "\n".join(m.content for m in request.messages)
        return text, UsageRecord(
            task_kind=request.task_kind,
            input_tokens=estimate_tokens(prompt_text),
            output_tokens=estimate_tokens(text),
            wall_time=0.0,
        )


class RecordingBackend:
    """Wraps another backend and persists every exchange for later replay."""

    def __init__(self, inner: Backend, store: str | Path):
        self.inner = inner
        self.store = Path(store)
        self.store.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> tuple[str, UsageRecord]:
        text, usage = self.inner.complete(request)
        digest = request_digest(request)
        entry = {
            "request": request.to_dict(),
            "response": text,
            "usage": usage.to_dict(),
        }
        with self._lock:
            path = self.store / f"{digest}.json"
            path.write_text(
                json.dumps(entry, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
        return text, usage


class SessionLog:
    """Thread-safe accumulator of usage records for one run."""

    def __init__(self) -> None:
        self._records: list[UsageRecord] = []
        self._lock = threading.Lock()

    def add(self, usage: UsageRecord) -> None:
        with self._lock:
            self._records.append(usage)

    @property
    def records(self) -> list[UsageRecord]:
        with self._lock:
            return list(self._records)


def complete(
    backend: Backend,
    request: CompletionRequest,
    session_log: SessionLog | None = None,
    token_ceiling: int = DEFAULT_PROMPT_TOKEN_CEILING,
) -> tuple[str, UsageRecord]:
    """Run one completion, enforcing the prompt budget and logging usage."""
    prompt_tokens = sum(estimate_tokens(m.content) for m in request.messages)
    if prompt_tokens > token_ceiling:
        raise PromptOverflow(
            f"prompt estimated at {prompt_tokens} tokens exceeds ceiling {token_ceiling}"
        )
    text, usage = backend.complete(request)
    if session_log is not None:
        session_log.add(usage)
    return text, usage


# ---------------------------------------------------------------------------
# Structured output parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)

_SCHEMA_REQUIRED = {
    "miner_extract": ["bug_background", "impact_scope", "trigger_conditions"],
    "codediff_extract": ["fix_description", "modified_entities", "key_elements"],
    "impact_judgement": ["status", "reasoning"],
}


def _first_json_block(text: str) -> dict[str, Any]:
    for match in _FENCE_RE.finditer(text):
        try:
            data = json.loads(match.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
            if isinstance(data, dict):
                return data
        except json.JSONDecodeError:
            pass
    raise NoStructuredBlock("no well-formed fenced JSON block in response")


def _identifier_tokens(values: Any) -> tuple[str, ...]:
    tokens = []
    for value in values or []:
        token = str(value).strip()
        if token and not any(c.isspace() for c in token):
            tokens.append(token)
    return tuple(tokens)


def _field_status(value: Any, name: str, confident: set[str]) -> FieldStatus:
    empty = value is None or value == "" or value == []
    if empty:
        return FieldStatus.MISSING
    return FieldStatus.COMPLETE if name in confident else FieldStatus.PARTIAL


_MINER_FIELDS = ["bug_background", "impact_scope", "trigger_conditions", "key_elements"]
_CODEDIFF_FIELDS = [
    "fix_description",
    "modified_entities",
    "trigger_conditions",
    "key_elements",
]


def _extract_from_block(role: ExtractRole, data: dict[str, Any]) -> SemanticExtract:
    confident = {str(f) for f in data.get("confident_fields", [])}
    field_names = _MINER_FIELDS if role is ExtractRole.MINER else _CODEDIFF_FIELDS
    completeness = tuple(
        (name, _field_status(data.get(name), name, confident))
        for name in sorted(field_names)
    )
    is_defect = data.get("is_defect")
    return SemanticExtract(
        role=role,
        bug_background=str(data.get("bug_background") or ""),
        impact_scope=str(data.get("impact_scope") or ""),
        trigger_condition_fragments=tuple(
            str(t) for t in data.get("trigger_conditions", []) if str(t).strip()
        ),
        fix_description=str(data.get("fix_description") or ""),
        modified_entities=tuple(
            ModifiedEntity(
                name=str(e.get("name", "")),
                change_annotation=str(e.get("change_annotation", "")),
            )
            for e in data.get("modified_entities", [])
            if isinstance(e, dict) and e.get("name")
        ),
        key_elements=_identifier_tokens(data.get("key_elements")),
        completeness=completeness,
        is_defect=bool(is_defect) if is_defect is not None else None,
    )


def parse_structured(
    text: str, schema: str
) -> SemanticExtract | ImpactJudgement:
    """Extract the first well-formed fenced JSON block and map it to a type.

    Unknown keys are ignored; absent required keys raise MissingKeys so the
    call site can run its one reformat retry.
    """
    if schema not in _SCHEMA_REQUIRED:
        raise ValueError(f"unknown schema {schema!r}")
    data = _first_json_block(text)
    missing = [k for k in _SCHEMA_REQUIRED[schema] if k not in data]
    if missing:
        raise MissingKeys(missing)
    if schema == "miner_extract":
        return _extract_from_block(ExtractRole.MINER, data)
    if schema == "codediff_extract":
        return _extract_from_block(ExtractRole.CODEDIFF, data)
    try:
        status = JudgementStatus(str(data["status"]).strip().lower())
    except ValueError as exc:
        raise MissingKeys(["status"]) from exc
    cited = tuple(
        CitedElement(identifier=str(c.get("identifier", "")), binding=c.get("binding"))
        for c in data.get("cited_elements", [])
        if isinstance(c, dict) and c.get("identifier")
    )
    return ImpactJudgement(
        status=status, cited_elements=cited, reasoning=str(data.get("reasoning", ""))
    )


# ---------------------------------------------------------------------------
# Progressive context augmentation
# ---------------------------------------------------------------------------

def load_prompt(name: str) -> str:
    return (
        resources.files("patchimpact.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    )


_ROLE_PROMPT = {
    ExtractRole.MINER: "miner_v1",
    ExtractRole.CODEDIFF: "codediff_v1",
}
_ROLE_SCHEMA = {
    ExtractRole.MINER: "miner_extract",
    ExtractRole.CODEDIFF: "codediff_extract",
}

_TEXT_FIELDS = ("bug_background", "impact_scope", "fix_description")
_STATUS_RANK = {FieldStatus.MISSING: 0, FieldStatus.PARTIAL: 1, FieldStatus.COMPLETE: 2}


def empty_extract(role: ExtractRole) -> SemanticExtract:
    names = _MINER_FIELDS if role is ExtractRole.MINER else _CODEDIFF_FIELDS
    return SemanticExtract(
        role=role,
        completeness=tuple((n, FieldStatus.MISSING) for n in sorted(names)),
    )


def serialize_history(extract: SemanticExtract) -> str:
    data = extract.to_dict()
    data.pop("role", None)
    data.pop("completeness", None)
    return json.dumps(data, sort_keys=True, ensure_ascii=False, indent=2)


def merge_extracts(history: SemanticExtract, new: SemanticExtract) -> SemanticExtract:
    """Monotone refinement: complete fields are never downgraded or replaced."""
    old_status = history.completeness_map()
    new_status = new.completeness_map()

    def keep_old(name: str) -> bool:
        return old_status.get(name) is FieldStatus.COMPLETE

    def merged_text(name: str) -> str:
        old_value = getattr(history, name)
        new_value = getattr(new, name)
        if keep_old(name):
            return old_value
        return new_value if new_value else old_value

    def merged_seq(old_seq: tuple, new_seq: tuple) -> tuple:
        merged = list(old_seq)
        for item in new_seq:
            if item not in merged:
                merged.append(item)
        return tuple(merged)

    merged_fragments = (
        history.trigger_condition_fragments
        if keep_old("trigger_conditions")
        else merged_seq(history.trigger_condition_fragments, new.trigger_condition_fragments)
    )
    completeness = []
    for name in sorted(set(old_status) | set(new_status)):
        old_rank = _STATUS_RANK.get(old_status.get(name, FieldStatus.MISSING), 0)
        new_rank = _STATUS_RANK.get(new_status.get(name, FieldStatus.MISSING), 0)
        rank = max(old_rank, new_rank)
        completeness.append(
            (name, [FieldStatus.MISSING, FieldStatus.PARTIAL, FieldStatus.COMPLETE][rank])
        )
    return SemanticExtract(
        role=history.role,
        bug_background=merged_text("bug_background"),
        impact_scope=merged_text("impact_scope"),
        trigger_condition_fragments=merged_fragments,
        fix_description=merged_text("fix_description"),
        modified_entities=merged_seq(history.modified_entities, new.modified_entities),
        key_elements=merged_seq(history.key_elements, new.key_elements),
        completeness=tuple(completeness),
        is_defect=history.is_defect if history.is_defect is not None else new.is_defect,
    )


def run_round(
    role: ExtractRole,
    history: SemanticExtract,
    chunk_text: str,
    backend: Backend,
    record_ref: str = "",
    feedback: str = "",
    task_kind: str = "",
    session_log: SessionLog | None = None,
    token_ceiling: int = DEFAULT_PROMPT_TOKEN_CEILING,
) -> SemanticExtract:
    """One mining round: prompt with history plus chunk, parse, merge.

    On a structured-parse failure the round retries once with a reformat
    instruction, then propagates the error.
    """
    if not chunk_text.strip():
        raise ValueError("chunk must be non-empty")
    template = load_prompt(_ROLE_PROMPT[role])
    feedback_block = f"Reviewer feedback on the previous round:\n{feedback}\n\n" if feedback else ""
    prompt = template.format(
        record_ref=record_ref or "(unidentified)",
        history=serialize_history(history),
        feedback=feedback_block,
        chunk=chunk_text,
    )
    request = CompletionRequest(
        messages=(Message("user", prompt),),
        agent_role=role.value,
        task_kind=task_kind,
    )
    text, _ = complete(backend, request, session_log, token_ceiling)
    schema = _ROLE_SCHEMA[role]
    try:
        parsed = parse_structured(text, schema)
    except (NoStructuredBlock, MissingKeys):
        retry_request = CompletionRequest(
            messages=(
                Message("user", prompt),
                Message("assistant", text),
                Message(
                    "user",
                    "Your previous reply was not a valid structured answer. "
                    "Respond again with only the required fenced JSON block.",
                ),
            ),
            agent_role=role.value,
            task_kind=task_kind,
        )
        retry_text, _ = complete(backend, retry_request, session_log, token_ceiling)
        parsed = parse_structured(retry_text, schema)
    assert isinstance(parsed, SemanticExtract)
    return merge_extracts(history, parsed)


def render_chunk(items: list) -> str:
    """Join metadata items or structural changes into one round's content."""
    parts = []
    for item in items:
        if hasattr(item, "text"):
            parts.append(item.text)
        elif hasattr(item, "category"):
            lines = [
                f"file: {item.file}",
                f"entity: {item.entity}",
                f"change: {item.category.value} ({item.annotation})",
            ]
            if item.before_fragment:
                lines.append(f"before:\n{item.before_fragment}")
            if item.after_fragment:
                lines.append(f"after:\n{item.after_fragment}")
            parts.append("\n".join(lines))
        else:
            parts.append(str(item))
    return "\n\n---\n\n".join(parts)


def progressive_loop(
    role: ExtractRole,
    chunks: list[str],
    validator: Callable[[SemanticExtract], Any],
    backend: Backend,
    max_rounds: int | None = None,
    record_ref: str = "",
    task_kind: str = "",
    session_log: SessionLog | None = None,
    token_ceiling: int = DEFAULT_PROMPT_TOKEN_CEILING,
) -> tuple[SemanticExtract, int]:
    """Feed chunks round by round until the validator is satisfied, the
    chunks are exhausted, or max_rounds is hit, whichever happens first.

    The validator's feedback is injected into the following round. A round
    whose parse fails (after its one retry) yields no new fields; the same
    chunk is re-presented while the round budget lasts.
    """
    if max_rounds is None:
        max_rounds = len(chunks) + 2
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    extract = empty_extract(role)
    rounds_used = 0
    feedback = ""
    index = 0
    while index < len(chunks) and rounds_used < max_rounds:
        rounds_used += 1
        advanced = True
        try:
            extract = run_round(
                role,
                extract,
                chunks[index],
                backend,
                record_ref=record_ref,
                feedback=feedback,
                task_kind=task_kind,
                session_log=session_log,
                token_ceiling=token_ceiling,
            )
        except (NoStructuredBlock, MissingKeys):
            advanced = False  # re-ask the same chunk with feedback
            feedback = "The previous answer could not be parsed; answer with the JSON block only."
        if advanced:
            report = validator(extract)
            if getattr(report, "overall", False):
                return extract, rounds_used
            feedback = getattr(report, "feedback_text", "") or feedback
            index += 1
    return extract, rounds_used
