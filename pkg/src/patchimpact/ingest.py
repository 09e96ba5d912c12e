"""Change-record loading, defect-fix prefiltering, metadata chunking, and
dependency requirement parsing.

Records come either from a repository REST API (read-only, paginated, with
exponential backoff) or from local fixture files so test runs never touch
the network.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import requests

from .model import ChangeRecord, DiscussionItem, RecordKind


class IngestError(Exception):
    pass


class NotFound(IngestError):
    pass


class NetworkError(IngestError):
    pass


class Malformed(IngestError):
    pass


class ConstraintKind(str, Enum):
    PINNED = "pinned"
    LOWER_BOUNDED = "lower_bounded"
    RANGE = "range"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class DependencySpec:
    """One parsed requirement line plus when the client was observed with it."""

    package: str
    constraint_kind: ConstraintKind
    literal: str
    observed_at: str = ""  # UTC ISO-8601 date

    def to_dict(self) -> dict[str, Any]:
        return {
            "package": self.package,
            "constraint_kind": self.constraint_kind.value,
            "literal": self.literal,
            "observed_at": self.observed_at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DependencySpec":
        return cls(
            package=data["package"],
            constraint_kind=ConstraintKind(data["constraint_kind"]),
            literal=data["literal"],
            observed_at=data.get("observed_at", ""),
        )


@dataclass(frozen=True)
class PrefilterDecision:
    verdict: str  # "candidate" | "excluded"
    matched_keywords: tuple[str, ...] = ()
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "matched_keywords": list(self.matched_keywords),
            "reason": self.reason,
        }


DEFAULT_INCLUDE_KEYWORDS = ["fix", "bug", "error", "incorrect", "wrong", "regression"]
DEFAULT_EXCLUDE_PREFIXES = ["docs", "refactor", "feat", "test", "chore", "ci"]

_LINK_RE = re.compile(r"#(\d+)")


def extract_linked_ids(text: str, self_id: str) -> list[str]:
    """Pull #NNNN cross-references out of text, dropping self-references."""
    seen: list[str] = []
    for match in _LINK_RE.finditer(text):
        ref = match.group(1)
        if ref != self_id and ref not in seen:
            seen.append(ref)
    return seen


def prefilter(
    record: ChangeRecord,
    include_keywords: list[str] | None = None,
    exclude_prefixes: list[str] | None = None,
) -> PrefilterDecision:
    """Deterministic keyword screen for defect-fix candidates.

    A conventional-commit exclude prefix on the title wins over any include
    keyword; otherwise any include keyword anywhere in title or body keeps
    the record as a candidate.
    """
    include = [k.lower() for k in (include_keywords or DEFAULT_INCLUDE_KEYWORDS)]
    exclude = [k.lower() for k in (exclude_prefixes or DEFAULT_EXCLUDE_PREFIXES)]
    if not include or not exclude:
        raise ValueError("keyword config needs non-empty include and exclude lists")

    title = record.title.lower()
    for prefix in exclude:
        if re.match(rf"^\s*{re.escape(prefix)}\s*[:(\[]", title) or title.startswith(
            prefix + " only"
        ):
            return PrefilterDecision(
                verdict="excluded", reason=f"exclude prefix: {prefix}"
            )

    haystack = f"{title}\n{record.body.lower()}"
    matched = [k for k in include if k in haystack]
    if matched:
        return PrefilterDecision(
            verdict="candidate",
            matched_keywords=tuple(matched),
            reason=f"include keywords: {', '.join(matched)}",
        )
    return PrefilterDecision(verdict="excluded", reason="no defect-related keyword")


# ---------------------------------------------------------------------------
# Metadata items and chunking
# ---------------------------------------------------------------------------

LINK_SUMMARY_BODY_LIMIT = 500


@dataclass(frozen=True)
class MetadataItem:
    """One unit of record context fed to the mining loop."""

    kind: str  # "title_body" | "linked_summary" | "comment"
    text: str


def _split_paragraphs(text: str, limit: int) -> list[str]:
    """Split oversized text at paragraph boundaries with continuation markers."""
    if len(text) <= limit:
        return [text]
    paragraphs = text.split("\n\n")
    parts: list[str] = []
    current = ""
    for para in paragraphs:
        while len(para) > limit:  # single paragraph larger than the limit
            if current:
                parts.append(current)
                current = ""
            parts.append(para[:limit])
            para = para[limit:]
        candidate = f"{current}\n\n{para}" if current else para
        if len(candidate) > limit and current:
            parts.append(current)
            current = para
        else:
            current = candidate
    if current:
        parts.append(current)
    if len(parts) > 1:
        parts = [
            p + ("\n…(continued)" if i < len(parts) - 1 else "")
            for i, p in enumerate(parts)
        ]
    return parts


def metadata_items(
    record: ChangeRecord,
    linked_records: dict[str, ChangeRecord] | None = None,
    max_item_chars: int | None = None,
) -> list[MetadataItem]:
    """Order the record's context: title+body first, then linked summaries,
    then discussion chronologically.

    Items larger than ``max_item_chars`` are split at paragraph boundaries,
    never silently truncated.
    """
    linked_records = linked_records or {}
    items: list[MetadataItem] = []

    head = f"[{record.kind.value} {record.id}] {record.title}"
    if record.body:
        head += f"\n\n{record.body}"
    items.append(MetadataItem(kind="title_body", text=head))

    for linked_id in record.linked_ids:
        linked = linked_records.get(linked_id)
        if linked is not None:
            summary = f"[linked {linked.kind.value} {linked.id}] {linked.title}"
            if linked.body:
                summary += f"\n\n{linked.body[:LINK_SUMMARY_BODY_LIMIT]}"
        else:
            summary = f"[linked record {linked_id}] (content unavailable)"
        items.append(MetadataItem(kind="linked_summary", text=summary))

    for comment in sorted(record.discussion_items, key=lambda d: d.timestamp):
        items.append(
            MetadataItem(kind="comment", text=f"{comment.author}: {comment.text}")
        )

    if max_item_chars is not None:
        split_items: list[MetadataItem] = []
        for item in items:
            for part in _split_paragraphs(item.text, max_item_chars):
                split_items.append(MetadataItem(kind=item.kind, text=part))
        items = split_items
    return items


def chunk_items(
    record: ChangeRecord,
    k: int = 3,
    linked_records: dict[str, ChangeRecord] | None = None,
    max_item_chars: int | None = None,
) -> list[list[MetadataItem]]:
    """Split the record's metadata items into ordered chunks of at most k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    items = metadata_items(record, linked_records, max_item_chars)
    return [items[i : i + k] for i in range(0, len(items), k)]


# ---------------------------------------------------------------------------
# Dependency requirement parsing
# ---------------------------------------------------------------------------

_REQUIREMENT_RE = re.compile(
    r"^\s*(?P<name>[A-Za-z0-9][A-Za-z0-9._-]*)\s*(?P<spec>(?:[<>=!~]=?|==)[^;#]*)?\s*(?:[;#].*)?$"
)


def parse_dependency_spec(text: str, observed_at: str = "") -> DependencySpec:
    """Classify one requirement line by how tightly it constrains the version."""
    if not text.strip():
        raise Malformed("empty requirement line")
    match = _REQUIREMENT_RE.match(text.strip())
    if not match:
        raise Malformed(f"unparseable requirement: {text!r}")
    name = match.group("name")
    spec = (match.group("spec") or "").strip()
    literal = text.strip()

    if not spec:
        kind = ConstraintKind.UNBOUNDED
    else:
        clauses = [c.strip() for c in spec.split(",") if c.strip()]
        ops = [re.match(r"(==|>=|<=|>|<|~=|!=)", c) for c in clauses]
        if any(op is None for op in ops):
            raise Malformed(f"unparseable constraint: {spec!r}")
        op_names = [op.group(1) for op in ops if op is not None]
        if len(clauses) == 1 and op_names[0] == "==":
            kind = ConstraintKind.PINNED
        elif len(clauses) == 1 and op_names[0] in (">=", ">"):
            kind = ConstraintKind.LOWER_BOUNDED
        else:
            kind = ConstraintKind.RANGE
    return DependencySpec(
        package=name, constraint_kind=kind, literal=literal, observed_at=observed_at
    )


def pinned_version(spec: DependencySpec) -> str | None:
    if spec.constraint_kind is not ConstraintKind.PINNED:
        return None
    match = re.search(r"==\s*([^\s,;#]+)", spec.literal)
    return match.group(1) if match else None


# ---------------------------------------------------------------------------
# Record sources
# ---------------------------------------------------------------------------

class FixtureChangeSource:
    """Loads ChangeRecords from ``<root>/changes/<id>.json`` (+ ``.patch``)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _paths(self, record_id: str) -> tuple[Path, Path]:
        base = self.root / "changes"
        return base / f"{record_id}.json", base / f"{record_id}.patch"

    def exists(self, record_id: str) -> bool:
        return self._paths(record_id)[0].exists()

    def load(self, record_id: str) -> ChangeRecord:
        json_path, patch_path = self._paths(record_id)
        if not json_path.exists():
            raise NotFound(f"no fixture for record {record_id!r} at {json_path}")
        try:
            data = json.loads(json_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise Malformed(f"fixture {json_path} is not valid JSON: {exc}") from exc
        if patch_path.exists() and not data.get("patch"):
            data["patch"] = patch_path.read_text(encoding="utf-8")
        try:
            record = ChangeRecord.from_dict(data)
        except (KeyError, ValueError) as exc:
            raise Malformed(f"fixture {json_path} fails schema: {exc}") from exc
        return _finalize_record(record)


class RemoteChangeSource:
    """Read-only client for GitHub-shaped REST endpoints.

    Paginates comment listings, retries transient failures with exponential
    backoff, and enforces a minimum interval between requests. The API token
    is read from the environment, never from config files.
    """

    def __init__(
        self,
        repo: str,
        base_url: str = "https://api.github.com",
        token_env: str = "PATCHIMPACT_REPO_TOKEN",
        session: Any | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        min_interval: float = 0.0,
        sleep=time.sleep,
    ):
        self.repo = repo
        self.base_url = base_url.rstrip("/")
        self.session = session or requests.Session()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.min_interval = min_interval
        self._sleep = sleep
        self._lock = threading.Lock()
        self._last_request = 0.0
        token = os.environ.get(token_env)
        self._headers = {"Accept": "application/vnd.github+json"}
        if token:
            self._headers["Authorization"] = f"Bearer {token}"

    def _get(self, path: str, accept: str | None = None) -> Any:
        url = f"{self.base_url}{path}"
        headers = dict(self._headers)
        if accept:
            headers["Accept"] = accept
        attempt = 0
        while True:
            with self._lock:
                wait = self.min_interval - (time.monotonic() - self._last_request)
                if wait > 0:
                    self._sleep(wait)
                self._last_request = time.monotonic()
            try:
                response = self.session.get(url, headers=headers, timeout=30)
            except Exception as exc:
                if attempt >= self.max_retries:
                    raise NetworkError(f"GET {url} failed: {exc}") from exc
                self._sleep(self.backoff_base * (2**attempt))
                attempt += 1
                continue
            if response.status_code == 404:
                raise NotFound(f"{url} -> 404")
            if response.status_code in (429, 500, 502, 503, 504):
                if attempt >= self.max_retries:
                    raise NetworkError(f"{url} -> {response.status_code} after retries")
                self._sleep(self.backoff_base * (2**attempt))
                attempt += 1
                continue
            if response.status_code != 200:
                raise NetworkError(f"{url} -> {response.status_code}")
            if accept and "json" not in accept:
                return response.text
            return response.json()

    def _paginate(self, path: str) -> list[Any]:
        items: list[Any] = []
        page = 1
        while True:
            batch = self._get(f"{path}{'&' if '?' in path else '?'}per_page=100&page={page}")
            if not batch:
                break
            items.extend(batch)
            if len(batch) < 100:
                break
            page += 1
        return items

    def load(self, record_id: str) -> ChangeRecord:
        if re.fullmatch(r"\d+", record_id):
            return self._load_pull(record_id)
        return self._load_commit(record_id)

    def _load_pull(self, number: str) -> ChangeRecord:
        pr = self._get(f"/repos/{self.repo}/pulls/{number}")
        comments = self._paginate(f"/repos/{self.repo}/issues/{number}/comments")
        patch = self._get(
            f"/repos/{self.repo}/pulls/{number}", accept="application/vnd.github.diff"
        )
        discussion = tuple(
            DiscussionItem(
                author=(c.get("user") or {}).get("login", ""),
                text=c.get("body", ""),
                timestamp=c.get("created_at", ""),
            )
            for c in comments
        )
        record = ChangeRecord(
            id=number,
            kind=RecordKind.PULL_REQUEST,
            title=pr.get("title", ""),
            body=pr.get("body") or "",
            discussion_items=discussion,
            patch=patch if isinstance(patch, str) else "",
            created_at=(pr.get("created_at", "") or "")[:10],
        )
        return _finalize_record(record)

    def _load_commit(self, sha: str) -> ChangeRecord:
        commit = self._get(f"/repos/{self.repo}/commits/{sha}")
        message = (commit.get("commit") or {}).get("message", "")
        title, _, body = message.partition("\n")
        patch_parts = []
        for f in commit.get("files", []):
            if f.get("patch"):
                patch_parts.append(
                    f"--- a/{f['filename']}\n+++ b/{f['filename']}\n{f['patch']}"
                )
        record = ChangeRecord(
            id=sha,
            kind=RecordKind.COMMIT,
            title=title.strip(),
            body=body.strip(),
            patch="\n".join(patch_parts) + ("\n" if patch_parts else ""),
            created_at=((commit.get("commit") or {}).get("author") or {}).get(
                "date", ""
            )[:10],
        )
        return _finalize_record(record)


def _finalize_record(record: ChangeRecord) -> ChangeRecord:
    """Fill linked ids and changed files derived from the raw payload."""
    from dataclasses import replace

    linked = list(record.linked_ids)
    for ref in extract_linked_ids(f"{record.title}\n{record.body}", record.id):
        if ref not in linked:
            linked.append(ref)
    files = list(record.files_changed)
    if record.patch and not files:
        from .diffcore import MalformedDiff, parse_unified_diff

        try:
            files = [d.path for d in parse_unified_diff(record.patch)]
        except MalformedDiff:
            files = []
    return replace(record, linked_ids=tuple(linked), files_changed=tuple(files))


def load_change(
    record_id: str,
    source: FixtureChangeSource | RemoteChangeSource,
) -> ChangeRecord:
    """Load one change record from a fixture directory or the remote API."""
    return source.load(record_id)
