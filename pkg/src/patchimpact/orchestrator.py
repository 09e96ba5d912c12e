"""Completeness validation with feedback, the rule-driven domain inference
layer (entity lifting, parameter exposure, trigger synthesis, semantic
merge), and synthesis of the final defect pattern from both agents'
extracts.

Rules are declarative templates loaded from a configuration file; applying
the same rule set to the same inputs always yields the same pattern
(first match wins within a rule type).
"""

from __future__ import annotations

import ast
import fnmatch
import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .model import (
    DefectPattern,
    FieldStatus,
    RiskFactor,
    RiskKind,
    SemanticExtract,
    TriggerCondition,
    TriggerRelation,
    Visibility,
    validate_pattern,
)

DEFAULT_MIN_WORDS = 8


class OrchestratorError(Exception):
    pass


class MalformedRule(OrchestratorError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"rule {index}: {reason}")
        self.index = index
        self.reason = reason


class EmptyTriggers(OrchestratorError):
    """Raised when no trigger condition can be synthesized."""


class RuleType(str, Enum):
    ENTITY_LIFTING = "entity_lifting"
    PARAMETER_EXPOSURE = "parameter_exposure"
    TRIGGER_SYNTHESIS = "trigger_synthesis"
    SEMANTIC_MERGE = "semantic_merge"


@dataclass(frozen=True)
class Rule:
    rule_type: RuleType
    match: str  # template over names/fragments, * wildcards allowed
    action: str | dict
    note: str = ""

    def matches(self, text: str) -> bool:
        normalized = re.sub(r"\s+", " ", text).strip()
        pattern = re.sub(r"\s+", " ", self.match).strip()
        return fnmatch.fnmatchcase(normalized, pattern)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...]
    synonyms: dict[str, tuple[str, ...]]
    config_keys: frozenset[str]

    def of_type(self, rule_type: RuleType) -> list[Rule]:
        return [r for r in self.rules if r.rule_type is rule_type]

    def first_match(self, rule_type: RuleType, text: str) -> Rule | None:
        for rule in self.of_type(rule_type):
            if rule.matches(text):
                return rule
        return None

    def synonyms_for(self, name: str) -> tuple[str, ...]:
        return tuple(s for s in self.synonyms.get(name, ()) if s != name)


def _validate_rule(index: int, raw: dict) -> Rule:
    try:
        rule_type = RuleType(raw["type"])
    except (KeyError, ValueError):
        raise MalformedRule(index, f"unknown or missing rule type: {raw.get('type')!r}")
    match = raw.get("match", "")
    if not match:
        raise MalformedRule(index, "empty match template")
    action = raw.get("action")
    if rule_type is RuleType.ENTITY_LIFTING:
        if not isinstance(action, str) or not action:
            raise MalformedRule(index, "entity_lifting action must be a lifted name")
    elif rule_type is RuleType.PARAMETER_EXPOSURE:
        if action not in ("retain", "drop"):
            raise MalformedRule(index, "parameter_exposure action must be retain or drop")
    elif rule_type is RuleType.TRIGGER_SYNTHESIS:
        if not isinstance(action, dict):
            raise MalformedRule(index, "trigger_synthesis action must be a mapping")
        for key in ("kind", "name", "relation"):
            if key not in action:
                raise MalformedRule(index, f"trigger_synthesis action missing {key!r}")
        try:
            RiskKind(action["kind"])
            relation = TriggerRelation(action["relation"])
        except ValueError as exc:
            raise MalformedRule(index, str(exc))
        if relation is TriggerRelation.EQUALS and "value" not in action:
            raise MalformedRule(index, "equals relation requires a value")
    elif rule_type is RuleType.SEMANTIC_MERGE:
        if action not in ("conjunction", "disjunction"):
            raise MalformedRule(index, "semantic_merge action must be conjunction or disjunction")
    return Rule(rule_type=rule_type, match=match, action=action, note=raw.get("note", ""))


def load_rules(path: str | Path | None = None) -> RuleSet:
    """Load and validate the rules configuration; order is preserved."""
    if path is None:
        text = resources.files("patchimpact.data").joinpath("default_rules.json").read_text(
            "utf-8"
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRule(-1, f"rules file is not valid JSON: {exc}")
    rules = tuple(_validate_rule(i, raw) for i, raw in enumerate(data.get("rules", [])))
    synonyms = {
        name: tuple(values) for name, values in sorted(data.get("synonyms", {}).items())
    }
    return RuleSet(
        rules=rules,
        synonyms=synonyms,
        config_keys=frozenset(data.get("config_keys", [])),
    )


# ---------------------------------------------------------------------------
# Completeness validation
# ---------------------------------------------------------------------------

_FIELD_FEEDBACK = {
    "trigger_conditions": "state the conditions under which the bug activates",
    "bug_background": "describe what was wrong and why it happened",
    "impact_scope": "describe which users or components are affected",
    "fix_description": "explain what the fix changes and why",
    "key_elements": "list the program elements tied to the defect",
    "modified_entities": "list the changed code entities",
}

_REQUIRED_BY_ROLE = {
    "miner": ["bug_background", "impact_scope", "trigger_conditions"],
    "codediff": ["fix_description", "modified_entities", "key_elements"],
}


@dataclass(frozen=True)
class CompletenessReport:
    statuses: tuple[tuple[str, FieldStatus], ...]
    feedback: tuple[tuple[str, str], ...]
    overall: bool

    @property
    def feedback_text(self) -> str:
        return "; ".join(f"{field}: {msg}" for field, msg in self.feedback)

    def status_of(self, field: str) -> FieldStatus:
        return dict(self.statuses).get(field, FieldStatus.MISSING)


def required_fields_for(role: str) -> list[str]:
    return list(_REQUIRED_BY_ROLE[role])


def _field_value(extract: SemanticExtract, field: str):
    if field == "trigger_conditions":
        return extract.trigger_condition_fragments
    return getattr(extract, field)


def validate_completeness(
    extract: SemanticExtract,
    required: list[str] | None = None,
    min_words: int = DEFAULT_MIN_WORDS,
) -> CompletenessReport:
    """Judge each required field: a text field is complete only when it is
    non-empty, at least ``min_words`` long, and self-reported as confident;
    list fields need at least one entry plus the confidence flag.
    """
    required = required or required_fields_for(extract.role.value)
    reported = extract.completeness_map()
    statuses: list[tuple[str, FieldStatus]] = []
    feedback: list[tuple[str, str]] = []
    for field in required:
        value = _field_value(extract, field)
        confident = reported.get(field) is FieldStatus.COMPLETE
        if isinstance(value, str):
            if not value.strip():
                status = FieldStatus.MISSING
            elif len(value.split()) >= min_words and confident:
                status = FieldStatus.COMPLETE
            else:
                status = FieldStatus.PARTIAL
        else:
            if not value:
                status = FieldStatus.MISSING
            elif confident:
                status = FieldStatus.COMPLETE
            else:
                status = FieldStatus.PARTIAL
        statuses.append((field, status))
        if status is FieldStatus.MISSING:
            feedback.append((field, _FIELD_FEEDBACK.get(field, f"provide {field}")))
        elif status is FieldStatus.PARTIAL:
            if isinstance(value, str) and len(value.split()) < min_words:
                feedback.append(
                    (field, f"expand {field}: at least {min_words} words of detail needed")
                )
            else:
                feedback.append((field, f"confirm {field} once the record supports it"))
    overall = all(status is FieldStatus.COMPLETE for _, status in statuses)
    return CompletenessReport(
        statuses=tuple(statuses), feedback=tuple(feedback), overall=overall
    )


# ---------------------------------------------------------------------------
# Library public surface and call graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PublicSurface:
    """What a client can reach: exported names, public method names, and
    keyword parameters of public constructors and callables."""

    names: frozenset[str]
    method_names: frozenset[str]
    constructor_params: frozenset[str]
    config_keys: frozenset[str] = frozenset()

    def is_public_name(self, name: str) -> bool:
        return name in self.names or name in self.method_names


def _callable_kwargs(node: ast.FunctionDef | ast.AsyncFunctionDef) -> list[str]:
    args = node.args
    names = [a.arg for a in args.args + args.posonlyargs + args.kwonlyargs]
    return [n for n in names if n not in ("self", "cls")]


def build_public_surface(
    library_root: str | Path, config_keys: frozenset[str] = frozenset()
) -> PublicSurface:
    """Compute the public surface statically from a library source snapshot:
    names exported at package top level plus keyword parameters of exported
    callables (constructors included)."""
    root = Path(library_root)
    exported: set[str] = set()
    for init in sorted(root.rglob("__init__.py")):
        try:
            tree = ast.parse(init.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in tree.body:
            if isinstance(node, ast.Assign):
                targets = [t.id for t in node.targets if isinstance(t, ast.Name)]
                if "__all__" in targets and isinstance(node.value, (ast.List, ast.Tuple)):
                    exported.update(
                        e.value
                        for e in node.value.elts
                        if isinstance(e, ast.Constant) and isinstance(e.value, str)
                    )
            elif isinstance(node, (ast.Import, ast.ImportFrom)):
                for alias in node.names:
                    name = alias.asname or alias.name.split(".")[-1]
                    if not name.startswith("_") and name != "*":
                        exported.add(name)
            elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                if not node.name.startswith("_"):
                    exported.add(node.name)

    params: set[str] = set()
    methods: set[str] = set()
    for path in sorted(root.rglob("*.py")):
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in tree.body:
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                if node.name in exported:
                    params.update(_callable_kwargs(node))
            elif isinstance(node, ast.ClassDef) and node.name in exported:
                for item in node.body:
                    if isinstance(item, (ast.FunctionDef, ast.AsyncFunctionDef)):
                        if item.name == "__init__":
                            params.update(_callable_kwargs(item))
                        elif not item.name.startswith("_"):
                            methods.add(item.name)
                            params.update(_callable_kwargs(item))
    return PublicSurface(
        names=frozenset(exported),
        method_names=frozenset(methods),
        constructor_params=frozenset(params),
        config_keys=config_keys,
    )


@dataclass(frozen=True)
class CallGraph:
    """Name-resolution call graph over library sources, intra-library only."""

    callers: dict[str, frozenset[str]]  # callee -> callers

    def callers_of(self, name: str) -> list[str]:
        return sorted(self.callers.get(name, frozenset()))


def build_call_graph(sources: dict[str, str]) -> CallGraph:
    """Build caller edges by simple name matching; unresolved calls are ignored."""
    known: set[str] = set()
    trees: dict[str, ast.Module] = {}
    for path, source in sorted(sources.items()):
        try:
            tree = ast.parse(source)
        except SyntaxError:
            continue
        trees[path] = tree
        for node in ast.walk(tree):
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                known.add(node.name)

    callers: dict[str, set[str]] = {}
    for tree in trees.values():

        def visit(node: ast.AST, owner: str | None) -> None:
            for child in ast.iter_child_nodes(node):
                if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                    visit(child, child.name)
                    continue
                if isinstance(child, ast.Call):
                    callee = None
                    if isinstance(child.func, ast.Name):
                        callee = child.func.id
                    elif isinstance(child.func, ast.Attribute):
                        callee = child.func.attr
                    if callee in known and owner is not None and callee != owner:
                        callers.setdefault(callee, set()).add(owner)
                visit(child, owner)

        visit(tree, None)
    return CallGraph(callers={k: frozenset(v) for k, v in callers.items()})


def _has_private_component(name: str) -> bool:
    return any(part.startswith("_") for part in name.replace("()", "").split("."))


def lift_entity(
    symbol: str,
    graph: CallGraph,
    rules: RuleSet,
    surface: PublicSurface,
) -> tuple[str, Visibility]:
    """Promote an internal symbol to the nearest user-facing API name.

    A matching lifting rule wins outright; otherwise a breadth-first walk
    toward callers returns the nearest public-surface name without a
    leading-underscore component. With no such caller the symbol comes back
    flagged internal.
    """
    if not symbol:
        raise ValueError("symbol must be non-empty")
    rule = rules.first_match(RuleType.ENTITY_LIFTING, symbol)
    if rule is not None:
        return str(rule.action), Visibility.PUBLIC

    def qualifies(name: str) -> bool:
        return not _has_private_component(name) and surface.is_public_name(name)

    seen = {symbol}
    frontier = [symbol]
    while frontier:
        next_frontier: list[str] = []
        for name in frontier:
            if qualifies(name):
                return name, Visibility.PUBLIC
            for caller in graph.callers_of(name):
                if caller not in seen:
                    seen.add(caller)
                    next_frontier.append(caller)
        frontier = sorted(next_frontier)
    return symbol, Visibility.INTERNAL


def expose_parameters(
    candidates: list[str],
    surface: PublicSurface,
    rules: RuleSet,
) -> tuple[list[RiskFactor], list[tuple[str, str]]]:
    """Keep only parameters reachable through public constructors or config.

    Returns (retained risk factors, dropped (name, reason) pairs).
    """
    retained: list[RiskFactor] = []
    dropped: list[tuple[str, str]] = []
    for name in candidates:
        rule = rules.first_match(RuleType.PARAMETER_EXPOSURE, name)
        if rule is not None and rule.action == "drop":
            dropped.append((name, f"exposure rule: {rule.match}"))
            continue
        if rule is not None and rule.action == "retain":
            kind = RiskKind.CONFIG_KEY if name in surface.config_keys else RiskKind.PARAMETER
        elif name in surface.config_keys:
            kind = RiskKind.CONFIG_KEY
        elif name in surface.constructor_params:
            kind = RiskKind.PARAMETER
        else:
            dropped.append((name, "not visible in public constructors or config"))
            continue
        retained.append(
            RiskFactor(
                kind=kind,
                name=name,
                visibility=Visibility.PUBLIC,
                synonyms=rules.synonyms_for(name),
            )
        )
    return retained, dropped


# ---------------------------------------------------------------------------
# Trigger synthesis
# ---------------------------------------------------------------------------

_ENV_TOKENS = ("npu", "gpu", "cuda", "ascend", "tpu", "rocm", "xpu", "cpu")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_EQUALS_RE = re.compile(
    r"(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*(?:==|=|is set to|set to|equals)\s*(?P<value>\"[^\"]*\"|'[^']*'|[A-Za-z0-9_.\-]+)"
)
_UNSET_RE = re.compile(
    r"(?:(?P<name1>[A-Za-z_][A-Za-z0-9_]*)\s+(?:is\s+)?(?:left\s+)?(?:unset|not set|never set|omitted|is none))"
    r"|(?:without\s+(?:explicitly\s+)?setting\s+(?P<name2>[A-Za-z_][A-Za-z0-9_]*))",
    re.IGNORECASE,
)
_PRESENT_RE = re.compile(
    r"(?:uses?|calls?|enables?|invokes?)\s+(?P<name>[A-Za-z_][A-Za-z0-9_]*)",
    re.IGNORECASE,
)


def _quote_value(value: str) -> str:
    value = value.strip()
    if value in ("None", "True", "False") or re.fullmatch(r"-?\d+(\.\d+)?", value):
        return value
    if value.startswith(("'", '"')):
        inner = value[1:-1]
        return f'"{inner}"'
    return f'"{value}"'


def _fragment_to_condition(fragment: str) -> tuple[RiskKind, str, TriggerRelation, str | None] | None:
    text = fragment.strip()
    lowered = text.lower()

    unset = _UNSET_RE.search(text)
    if unset:
        name = unset.group("name1") or unset.group("name2")
        return (RiskKind.PARAMETER, name, TriggerRelation.UNSET, None)

    if re.search(r"\bis not none\b", lowered):
        ident = _IDENT_RE.search(text)
        if ident:
            return (RiskKind.PARAMETER, ident.group(0), TriggerRelation.PRESENT, None)

    equals = _EQUALS_RE.search(text)
    if equals and equals.group("value").lower() != "none":
        return (
            RiskKind.PARAMETER,
            equals.group("name"),
            TriggerRelation.EQUALS,
            _quote_value(equals.group("value")),
        )
    if equals:  # name == None reads as unset
        return (RiskKind.PARAMETER, equals.group("name"), TriggerRelation.UNSET, None)

    for token in _ENV_TOKENS:
        if re.search(rf"\b{token}\b", lowered):
            return (RiskKind.CONSTANT, token, TriggerRelation.ENVIRONMENT, token)

    present = _PRESENT_RE.search(text)
    if present:
        return (RiskKind.PARAMETER, present.group("name"), TriggerRelation.PRESENT, None)

    ident = _IDENT_RE.search(text)
    if ident and "_" in ident.group(0):
        return (RiskKind.PARAMETER, ident.group(0), TriggerRelation.PRESENT, None)
    return None


def synthesize_trigger(
    fragments: list[str],
    rules: RuleSet,
    call_name: str = "configure",
) -> tuple[list[TriggerCondition], list[RiskFactor], str]:
    """Map condition fragments to client-form trigger conditions plus a
    minimal, syntactically valid client snippet exercising all of them.

    All conditions share one conjunction group unless a semantic_merge rule
    declares disjunction. Raises EmptyTriggers when nothing can be mapped.
    """
    if not fragments:
        raise EmptyTriggers("no trigger condition fragments to synthesize")

    parsed: list[tuple[RiskKind, str, TriggerRelation, str | None]] = []
    for fragment in fragments:
        rule = rules.first_match(RuleType.TRIGGER_SYNTHESIS, fragment)
        if rule is not None:
            action = rule.action
            assert isinstance(action, dict)
            parsed.append(
                (
                    RiskKind(action["kind"]),
                    str(action["name"]),
                    TriggerRelation(action["relation"]),
                    action.get("value"),
                )
            )
            continue
        mapped = _fragment_to_condition(fragment)
        if mapped is not None:
            parsed.append(mapped)
    if not parsed:
        raise EmptyTriggers("no fragment could be mapped to a client-form condition")

    disjunction = any(
        rules.first_match(RuleType.SEMANTIC_MERGE, fragment) is not None
        and rules.first_match(RuleType.SEMANTIC_MERGE, fragment).action == "disjunction"
        for fragment in fragments
    )

    conditions: list[TriggerCondition] = []
    factors: dict[str, RiskFactor] = {}
    seen: set[tuple] = set()
    group = 0
    for kind, name, relation, value in parsed:
        key = (name, relation, value)
        if key in seen:
            continue
        seen.add(key)
        conditions.append(
            TriggerCondition(subject=name, relation=relation, value=value, group=group)
        )
        if disjunction:
            group += 1
        if name not in factors:
            factors[name] = RiskFactor(
                kind=kind,
                name=name,
                expected_value=value if relation is TriggerRelation.EQUALS else None,
                visibility=Visibility.PUBLIC,
                synonyms=rules.synonyms_for(name),
            )
    example = _render_minimal_example(conditions, call_name)
    return conditions, list(factors.values()), example


def _render_minimal_example(conditions: list[TriggerCondition], call_name: str) -> str:
    kwargs: list[str] = []
    env_lines: list[str] = []
    unset_names: list[str] = []
    for cond in conditions:
        if cond.relation is TriggerRelation.EQUALS:
            kwargs.append(f"{cond.subject}={cond.value}")
        elif cond.relation is TriggerRelation.PRESENT:
            kwargs.append(f"{cond.subject}=True")
        elif cond.relation is TriggerRelation.UNSET:
            unset_names.append(cond.subject)
        elif cond.relation is TriggerRelation.ENVIRONMENT:
            env_lines.append(f'device = "{cond.value or cond.subject}"')
    lines = list(dict.fromkeys(env_lines))
    call = f"client = {call_name.replace('()', '')}({', '.join(kwargs)})"
    if unset_names:
        call += f"  # {', '.join(unset_names)} left unset"
    lines.append(call)
    example = "\n".join(lines) + "\n"
    try:
        ast.parse(example)
    except SyntaxError:
        safe_kwargs = ", ".join(f"{k.split('=')[0]}=None" for k in kwargs)
        example = f"client = {call_name.replace('()', '')}({safe_kwargs})\n"
    return example


# ---------------------------------------------------------------------------
# Pattern synthesis
# ---------------------------------------------------------------------------

def _looks_like_defect(extract: SemanticExtract) -> bool:
    return bool(
        extract.bug_background.strip()
        and (extract.trigger_condition_fragments or extract.modified_entities)
    )


def synthesize_pattern(
    miner: SemanticExtract,
    codediff: SemanticExtract,
    rules: RuleSet,
    surface: PublicSurface,
    call_graph: CallGraph | None = None,
    source_id: str = "",
    provenance: tuple[str, ...] = (),
    domain_mapping: bool = True,
) -> DefectPattern:
    """Combine both extracts into the final user-facing defect pattern.

    The miner supplies user-visible background and scope; the code-diff
    extract supplies fix mechanics and entities. Key elements pass through
    parameter exposure and entity lifting; triggers come from fragment
    synthesis. A pattern with no synthesizable trigger is emitted flagged
    incomplete.
    """
    call_graph = call_graph or CallGraph(callers={})
    explicit = miner.is_defect if miner.is_defect is not None else codediff.is_defect
    is_defect = (
        explicit
        if explicit is not None
        else (_looks_like_defect(miner) or _looks_like_defect(codediff))
    )
    provenance = provenance or ((source_id,) if source_id else ())
    if not is_defect:
        return DefectPattern(
            source_id=source_id,
            is_defect=False,
            bug_background=miner.bug_background,
            impact_scope=miner.impact_scope,
            provenance=provenance,
        )

    bug_background = miner.bug_background.strip()
    miner_report = validate_completeness(miner, ["bug_background"])
    if codediff.fix_description.strip() and (
        not bug_background
        or miner_report.status_of("bug_background") is not FieldStatus.COMPLETE
    ):
        root_cause = codediff.fix_description.strip()
        bug_background = (
            f"{bug_background} Root cause: {root_cause}" if bug_background else root_cause
        )
    impact_scope = miner.impact_scope.strip() or codediff.fix_description.strip()

    candidates: list[str] = []
    for element in (
        list(miner.key_elements)
        + list(codediff.key_elements)
        + [e.name for e in codediff.modified_entities]
    ):
        name = element.replace("()", "")
        if name and name not in candidates:
            candidates.append(name)

    factors: dict[str, RiskFactor] = {}
    if domain_mapping:
        param_candidates = [
            c
            for c in candidates
            if c in surface.constructor_params
            or c in surface.config_keys
            or rules.first_match(RuleType.PARAMETER_EXPOSURE, c) is not None
        ]
        retained, _dropped = expose_parameters(param_candidates, surface, rules)
        for factor in retained:
            factors.setdefault(factor.name, factor)
        for name in candidates:
            if name in factors:
                continue
            lifted, visibility = lift_entity(name, call_graph, rules, surface)
            if visibility is not Visibility.PUBLIC:
                continue  # internal-only symbols never reach the pattern
            lifted_name = lifted.replace("()", "")
            factors.setdefault(
                lifted_name,
                RiskFactor(
                    kind=RiskKind.METHOD_CALL,
                    name=lifted_name,
                    visibility=Visibility.PUBLIC,
                    synonyms=rules.synonyms_for(lifted_name),
                ),
            )
    else:
        for name in candidates:
            kind = (
                RiskKind.PARAMETER
                if name in surface.constructor_params or "_" in name
                else RiskKind.METHOD_CALL
            )
            factors.setdefault(
                name,
                RiskFactor(
                    kind=kind,
                    name=name,
                    visibility=Visibility.PUBLIC,
                    synonyms=rules.synonyms_for(name),
                ),
            )

    method_names = [f.name for f in factors.values() if f.kind is RiskKind.METHOD_CALL]
    call_name = method_names[0] if method_names else "configure"

    fragments = list(miner.trigger_condition_fragments)
    for fragment in codediff.trigger_condition_fragments:
        if fragment not in fragments:
            fragments.append(fragment)

    incomplete = False
    conditions: list[TriggerCondition] = []
    example = ""
    try:
        conditions, subject_factors, example = synthesize_trigger(
            fragments, rules, call_name=call_name
        )
        for factor in subject_factors:
            existing = factors.get(factor.name)
            if existing is None or (
                existing.expected_value is None and factor.expected_value is not None
            ):
                factors[factor.name] = factor
    except EmptyTriggers:
        incomplete = True

    if not factors and not conditions and candidates:
        # every element mapped to internal-only symbols; fall back to the raw
        # candidates so the pattern stays usable for scanning
        for name in candidates:
            factors[name] = RiskFactor(
                kind=RiskKind.PARAMETER,
                name=name,
                visibility=Visibility.PUBLIC,
                synonyms=rules.synonyms_for(name),
            )
        incomplete = True

    pattern = DefectPattern(
        source_id=source_id,
        is_defect=True,
        bug_background=bug_background,
        impact_scope=impact_scope,
        trigger_conditions=tuple(conditions),
        risk_factors=tuple(factors[name] for name in sorted(factors)),
        minimal_client_example=example,
        provenance=provenance,
        incomplete=incomplete,
    )
    violations = validate_pattern(pattern)
    if violations:
        raise OrchestratorError(f"synthesized pattern is invalid: {violations}")
    return pattern
