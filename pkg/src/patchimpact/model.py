"""Core domain types shared by all pipeline stages.

Every type here is an immutable value object (frozen dataclass with tuple
fields), safe to share across concurrent tasks. The canonical on-disk form
is JSON with sorted keys and snake_case field names so fixtures stay
diff-able; ``to_dict``/``from_dict`` on each type round-trip losslessly.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any


class RecordKind(str, Enum):
    PULL_REQUEST = "pull_request"
    COMMIT = "commit"


class ExtractRole(str, Enum):
    MINER = "miner"
    CODEDIFF = "codediff"


class FieldStatus(str, Enum):
    MISSING = "missing"
    PARTIAL = "partial"
    COMPLETE = "complete"


class RiskKind(str, Enum):
    METHOD_CALL = "method_call"
    PARAMETER = "parameter"
    CONFIG_KEY = "config_key"
    CONSTANT = "constant"


class Visibility(str, Enum):
    PUBLIC = "public"
    INTERNAL = "internal"


class TriggerRelation(str, Enum):
    EQUALS = "equals"
    UNSET = "unset"
    PRESENT = "present"
    ABSENT = "absent"
    ENVIRONMENT = "environment"


class ExpansionLevel(str, Enum):
    STATEMENT = "statement"
    ENCLOSING_BLOCK = "enclosing_block"
    FUNCTION = "function"
    CLASS = "class"
    MODULE = "module"

    @property
    def rank(self) -> int:
        return _LEVEL_ORDER.index(self)


_LEVEL_ORDER = [
    ExpansionLevel.STATEMENT,
    ExpansionLevel.ENCLOSING_BLOCK,
    ExpansionLevel.FUNCTION,
    ExpansionLevel.CLASS,
    ExpansionLevel.MODULE,
]


class VerificationStatus(str, Enum):
    VERIFIED = "verified"
    CONSERVATIVE_REJECT = "conservative_reject"


@dataclass(frozen=True)
class DiscussionItem:
    """One comment or review message attached to a change record."""

    author: str
    text: str
    timestamp: str  # full ISO-8601 instant

    def to_dict(self) -> dict[str, Any]:
        return {"author": self.author, "text": self.text, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DiscussionItem":
        return cls(
            author=data.get("author", ""),
            text=data.get("text", ""),
            timestamp=data.get("timestamp", ""),
        )


@dataclass(frozen=True)
class ChangeRecord:
    """A pull request or commit: metadata, discussion, and patch text."""

    id: str
    kind: RecordKind
    title: str
    body: str = ""
    discussion_items: tuple[DiscussionItem, ...] = ()
    linked_ids: tuple[str, ...] = ()
    patch: str = ""
    files_changed: tuple[str, ...] = ()
    created_at: str = ""  # UTC ISO-8601 calendar date

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "title": self.title,
            "body": self.body,
            "discussion_items": [d.to_dict() for d in self.discussion_items],
            "linked_ids": list(self.linked_ids),
            "patch": self.patch,
            "files_changed": list(self.files_changed),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChangeRecord":
        return cls(
            id=str(data["id"]),
            kind=RecordKind(data["kind"]),
            title=data.get("title", ""),
            body=data.get("body", ""),
            discussion_items=tuple(
                DiscussionItem.from_dict(d) for d in data.get("discussion_items", [])
            ),
            linked_ids=tuple(str(i) for i in data.get("linked_ids", [])),
            patch=data.get("patch", ""),
            files_changed=tuple(data.get("files_changed", [])),
            created_at=data.get("created_at", ""),
        )


@dataclass(frozen=True)
class ModifiedEntity:
    """A changed library entity with its semantic change annotation."""

    name: str
    change_annotation: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "change_annotation": self.change_annotation}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModifiedEntity":
        return cls(name=data["name"], change_annotation=data.get("change_annotation", ""))


@dataclass(frozen=True)
class SemanticExtract:
    """Intermediate agent output with per-field completeness status.

    ``is_defect`` carries the miner's defect verdict; it is optional because
    the code-diff side may not state one.
    """

    role: ExtractRole
    bug_background: str = ""
    impact_scope: str = ""
    trigger_condition_fragments: tuple[str, ...] = ()
    fix_description: str = ""
    modified_entities: tuple[ModifiedEntity, ...] = ()
    key_elements: tuple[str, ...] = ()
    completeness: tuple[tuple[str, FieldStatus], ...] = ()
    is_defect: bool | None = None

    def completeness_map(self) -> dict[str, FieldStatus]:
        return dict(self.completeness)

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role.value,
            "bug_background": self.bug_background,
            "impact_scope": self.impact_scope,
            "trigger_condition_fragments": list(self.trigger_condition_fragments),
            "fix_description": self.fix_description,
            "modified_entities": [e.to_dict() for e in self.modified_entities],
            "key_elements": list(self.key_elements),
            "completeness": {k: v.value for k, v in self.completeness},
            "is_defect": self.is_defect,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SemanticExtract":
        return cls(
            role=ExtractRole(data["role"]),
            bug_background=data.get("bug_background", ""),
            impact_scope=data.get("impact_scope", ""),
            trigger_condition_fragments=tuple(data.get("trigger_condition_fragments", [])),
            fix_description=data.get("fix_description", ""),
            modified_entities=tuple(
                ModifiedEntity.from_dict(e) for e in data.get("modified_entities", [])
            ),
            key_elements=tuple(data.get("key_elements", [])),
            completeness=tuple(
                (k, FieldStatus(v)) for k, v in sorted(data.get("completeness", {}).items())
            ),
            is_defect=data.get("is_defect"),
        )


@dataclass(frozen=True)
class RiskFactor:
    """An externally visible element whose use can activate the defect."""

    kind: RiskKind
    name: str
    expected_value: str | None = None
    visibility: Visibility = Visibility.PUBLIC
    synonyms: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "expected_value": self.expected_value,
            "visibility": self.visibility.value,
            "synonyms": list(self.synonyms),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RiskFactor":
        return cls(
            kind=RiskKind(data["kind"]),
            name=data["name"],
            expected_value=data.get("expected_value"),
            visibility=Visibility(data.get("visibility", "public")),
            synonyms=tuple(data.get("synonyms", [])),
        )


@dataclass(frozen=True)
class TriggerCondition:
    """A predicate over client usage; conditions in one group are conjunctive."""

    subject: str  # name of a RiskFactor listed on the same pattern
    relation: TriggerRelation
    value: str | None = None  # verbatim source text, not a parsed value
    group: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "relation": self.relation.value,
            "value": self.value,
            "group": self.group,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TriggerCondition":
        return cls(
            subject=data["subject"],
            relation=TriggerRelation(data["relation"]),
            value=data.get("value"),
            group=int(data.get("group", 0)),
        )


@dataclass(frozen=True)
class DefectPattern:
    """Structured, user-facing description of one library defect.

    ``incomplete`` flags patterns whose trigger conditions could not be
    synthesized; such patterns are still emitted.
    """

    source_id: str
    is_defect: bool
    bug_background: str = ""
    impact_scope: str = ""
    trigger_conditions: tuple[TriggerCondition, ...] = ()
    risk_factors: tuple[RiskFactor, ...] = ()
    minimal_client_example: str = ""
    provenance: tuple[str, ...] = ()
    incomplete: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "is_defect": self.is_defect,
            "bug_background": self.bug_background,
            "impact_scope": self.impact_scope,
            "trigger_conditions": [c.to_dict() for c in self.trigger_conditions],
            "risk_factors": [f.to_dict() for f in self.risk_factors],
            "minimal_client_example": self.minimal_client_example,
            "provenance": list(self.provenance),
            "incomplete": self.incomplete,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DefectPattern":
        return cls(
            source_id=str(data["source_id"]),
            is_defect=bool(data["is_defect"]),
            bug_background=data.get("bug_background", ""),
            impact_scope=data.get("impact_scope", ""),
            trigger_conditions=tuple(
                TriggerCondition.from_dict(c) for c in data.get("trigger_conditions", [])
            ),
            risk_factors=tuple(RiskFactor.from_dict(f) for f in data.get("risk_factors", [])),
            minimal_client_example=data.get("minimal_client_example", ""),
            provenance=tuple(str(p) for p in data.get("provenance", [])),
            incomplete=bool(data.get("incomplete", False)),
        )


@dataclass(frozen=True)
class MatchedElement:
    """The risk factor that matched plus the exact token found in client code."""

    factor: RiskFactor
    token: str

    def to_dict(self) -> dict[str, Any]:
        return {"factor": self.factor.to_dict(), "token": self.token}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MatchedElement":
        return cls(factor=RiskFactor.from_dict(data["factor"]), token=data["token"])


@dataclass(frozen=True)
class ClientContext:
    """A matched region of client code: span, excerpt, and expansion level."""

    file: str
    matched_element: MatchedElement
    span: tuple[int, int]  # (start line, end line), 1-based inclusive
    source_excerpt: str
    expansion_level: ExpansionLevel

    def to_dict(self) -> dict[str, Any]:
        return {
            "file": self.file,
            "matched_element": self.matched_element.to_dict(),
            "span": list(self.span),
            "source_excerpt": self.source_excerpt,
            "expansion_level": self.expansion_level.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ClientContext":
        span = data["span"]
        return cls(
            file=data["file"],
            matched_element=MatchedElement.from_dict(data["matched_element"]),
            span=(int(span[0]), int(span[1])),
            source_excerpt=data.get("source_excerpt", ""),
            expansion_level=ExpansionLevel(data["expansion_level"]),
        )


@dataclass(frozen=True)
class Evidence:
    """One statically confirmed identifier occurrence in client code."""

    identifier: str
    file: str
    line: int

    def to_dict(self) -> dict[str, Any]:
        return {"identifier": self.identifier, "file": self.file, "line": self.line}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Evidence":
        return cls(identifier=data["identifier"], file=data["file"], line=int(data["line"]))


@dataclass(frozen=True)
class Justification:
    """Reasoning trace plus the static-evidence entries backing a verdict."""

    reasoning: str
    static_checks: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"reasoning": self.reasoning, "static_checks": list(self.static_checks)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Justification":
        return cls(
            reasoning=data.get("reasoning", ""),
            static_checks=tuple(data.get("static_checks", [])),
        )


@dataclass(frozen=True)
class ImpactReport:
    """Final verdict for one (defect pattern, client) pair."""

    client_id: str
    pattern_id: str
    is_affected: bool
    matched_evidence: tuple[Evidence, ...] = ()
    justification: Justification = field(default_factory=lambda: Justification(""))
    verification_status: VerificationStatus = VerificationStatus.VERIFIED
    retries_used: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id,
            "pattern_id": self.pattern_id,
            "is_affected": self.is_affected,
            "matched_evidence": [e.to_dict() for e in self.matched_evidence],
            "justification": self.justification.to_dict(),
            "verification_status": self.verification_status.value,
            "retries_used": self.retries_used,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ImpactReport":
        return cls(
            client_id=str(data["client_id"]),
            pattern_id=str(data["pattern_id"]),
            is_affected=bool(data["is_affected"]),
            matched_evidence=tuple(
                Evidence.from_dict(e) for e in data.get("matched_evidence", [])
            ),
            justification=Justification.from_dict(data.get("justification", {})),
            verification_status=VerificationStatus(data["verification_status"]),
            retries_used=int(data.get("retries_used", 0)),
        )


class JudgementStatus(str, Enum):
    SATISFIED = "satisfied"
    UNSATISFIED = "unsatisfied"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class CitedElement:
    """One code element an impact judgement appeals to."""

    identifier: str
    binding: str | None = None  # literal source text when the citation binds a value

    def to_dict(self) -> dict[str, Any]:
        return {"identifier": self.identifier, "binding": self.binding}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CitedElement":
        return cls(identifier=data["identifier"], binding=data.get("binding"))


@dataclass(frozen=True)
class ImpactJudgement:
    """Per-context trigger-condition assessment from the impact analysis role."""

    status: JudgementStatus
    cited_elements: tuple[CitedElement, ...] = ()
    reasoning: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "cited_elements": [c.to_dict() for c in self.cited_elements],
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ImpactJudgement":
        return cls(
            status=JudgementStatus(data["status"]),
            cited_elements=tuple(
                CitedElement.from_dict(c) for c in data.get("cited_elements", [])
            ),
            reasoning=data.get("reasoning", ""),
        )


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary-classification outcome counts."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict[str, Any]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConfusionCounts":
        return cls(tp=int(data["tp"]), fp=int(data["fp"]), fn=int(data["fn"]), tn=int(data["tn"]))


def to_json(obj: Any) -> str:
    """Serialize any domain object to its canonical JSON text."""
    return json.dumps(obj.to_dict(), sort_keys=True, indent=2) + "\n"


def parses_as_source(text: str) -> bool:
    """True iff ``text`` is syntactically valid source of the analyzed language."""
    try:
        ast.parse(text)
    except SyntaxError:
        return False
    return True


def validate_report(report: ImpactReport) -> list[str]:
    """Check ImpactReport invariants; returns violation descriptions."""
    violations = []
    if report.is_affected:
        if report.verification_status is not VerificationStatus.VERIFIED:
            violations.append("is_affected requires verification_status=verified")
        if not report.matched_evidence:
            violations.append("is_affected requires non-empty matched_evidence")
    if (
        report.verification_status is VerificationStatus.CONSERVATIVE_REJECT
        and report.is_affected
    ):
        violations.append("conservative_reject requires is_affected=false")
    if report.retries_used < 0:
        violations.append("retries_used must be >= 0")
    return violations


def validate_pattern(pattern: DefectPattern) -> list[str]:
    """Check DefectPattern invariants; violations are data, not errors."""
    violations = []
    if pattern.is_defect:
        if not pattern.bug_background:
            violations.append("is_defect requires non-empty bug_background")
        if not pattern.risk_factors and not pattern.trigger_conditions:
            violations.append("is_defect requires risk factor or trigger condition")
    if pattern.minimal_client_example and not parses_as_source(pattern.minimal_client_example):
        violations.append("minimal_client_example does not parse")
    factor_names = {f.name for f in pattern.risk_factors}
    for cond in pattern.trigger_conditions:
        if cond.subject not in factor_names:
            violations.append(f"trigger condition subject {cond.subject!r} has no risk factor")
        if cond.relation is TriggerRelation.EQUALS and cond.value is None:
            violations.append(f"equals condition on {cond.subject!r} lacks a value")
        if (
            cond.relation
            in (TriggerRelation.UNSET, TriggerRelation.PRESENT, TriggerRelation.ABSENT)
            and cond.value is not None
        ):
            violations.append(
                f"{cond.relation.value} condition on {cond.subject!r} must not carry a value"
            )
    for factor in pattern.risk_factors:
        if not factor.name:
            violations.append("risk factor with empty name")
        if factor.visibility is not Visibility.PUBLIC:
            violations.append(f"risk factor {factor.name!r} is not public")
        if factor.name in factor.synonyms:
            violations.append(f"risk factor {factor.name!r} lists itself as a synonym")
    return violations


_ALL_TYPES = (
    DiscussionItem,
    ChangeRecord,
    ModifiedEntity,
    SemanticExtract,
    RiskFactor,
    TriggerCondition,
    DefectPattern,
    MatchedElement,
    ClientContext,
    Evidence,
    Justification,
    ImpactReport,
    CitedElement,
    ImpactJudgement,
    ConfusionCounts,
)


def roundtrip(obj: Any) -> Any:
    """Serialize then deserialize through canonical JSON; identity on all fields."""
    data = json.loads(to_json(obj))
    return type(obj).from_dict(data)


def field_names(cls: type) -> list[str]:
    return [f.name for f in fields(cls)]
