"""Client-side analysis: dependency exposure resolution, syntax-aware risk
factor search, upward context expansion, and trigger-condition assessment.

Scanning matches identifiers exactly (never by substring) on attribute
names, keyword arguments, string literals, and config-dict keys, widened by
a per-factor synonym table plus common morphological variants.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

from . import diffcore
from .agents import (
    Backend,
    CompletionRequest,
    Message,
    MissingKeys,
    NoStructuredBlock,
    SessionLog,
    complete,
    load_prompt,
    parse_structured,
)
from .model import (
    ClientContext,
    DefectPattern,
    ExpansionLevel,
    ImpactJudgement,
    JudgementStatus,
    MatchedElement,
    RiskFactor,
    TriggerRelation,
)

# re-exported: the judgement type belongs to this stage's vocabulary
__all__ = [
    "Exposure",
    "ImpactJudgement",
    "JudgementStatus",
    "resolve_exposure",
    "match_pinned_version",
    "scan_for_risk_factors",
    "expand_context",
    "assess_context",
    "analyze_client",
    "AnalysisLimits",
]


@dataclass(frozen=True)
class Exposure:
    verdict: str  # exposed | not_exposed | assumed_exposed
    reason: str

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "reason": self.reason}


@dataclass(frozen=True)
class DefectWindow:
    """Version/date bounds of the defect's presence in the library."""

    introduced_version: str | None = None
    fixed_version: str | None = None
    introduced_date: str = ""  # UTC ISO dates; empty means unknown
    fixed_date: str = ""


class UnknownVersionOrder(Exception):
    pass


def _version_key(version: str) -> tuple[int, ...]:
    parts = version.strip().split(".")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UnknownVersionOrder(f"version {version!r} is not comparable") from exc


def resolve_exposure(spec, window: DefectWindow) -> Exposure:
    """Decide whether the client's dependency can resolve to a defective
    version.

    Pinned versions are compared against [introduced, fixed); non-pinned
    constraints resolve to the latest release at observation time, so the
    observation date is compared against the defect window. Versions that
    cannot be ordered yield a conservative assumed_exposed.
    """
    from .ingest import ConstraintKind, pinned_version

    if window.introduced_date and window.fixed_date:
        if window.fixed_date < window.introduced_date:
            raise ValueError("fixed_date precedes introduced_date")

    if spec.constraint_kind is ConstraintKind.PINNED:
        version = pinned_version(spec)
        if version is None:
            return Exposure(
                verdict="assumed_exposed",
                reason=f"pinned constraint {spec.literal!r} carries no readable version",
            )
        try:
            key = _version_key(version)
            if window.fixed_version is not None and key >= _version_key(window.fixed_version):
                return Exposure(
                    verdict="not_exposed",
                    reason=f"pinned {version} is at or after the fix ({window.fixed_version})",
                )
            if window.introduced_version is not None and key < _version_key(
                window.introduced_version
            ):
                return Exposure(
                    verdict="not_exposed",
                    reason=f"pinned {version} predates the defect ({window.introduced_version})",
                )
            return Exposure(
                verdict="exposed",
                reason=f"pinned {version} falls inside the defective range",
            )
        except UnknownVersionOrder as exc:
            return Exposure(
                verdict="assumed_exposed",
                reason=f"{exc}; conservatively assuming exposure",
            )

    # Non-pinned: the resolver takes the latest version available at the
    # client's observed runtime/install date.
    observed = spec.observed_at
    if not observed:
        return Exposure(
            verdict="assumed_exposed",
            reason="no observation date for an unpinned constraint; assuming exposure",
        )
    if window.fixed_date and observed >= window.fixed_date:
        return Exposure(
            verdict="not_exposed",
            reason=f"observed {observed} on or after the fix date {window.fixed_date}",
        )
    if window.introduced_date and observed <= window.introduced_date:
        return Exposure(
            verdict="not_exposed",
            reason=f"observed {observed} before the defect existed ({window.introduced_date})",
        )
    fixed_text = window.fixed_date or "unknown"
    return Exposure(
        verdict="assumed_exposed",
        reason=(
            f"unpinned constraint observed {observed}, after the defect appeared "
            f"({window.introduced_date or 'unknown'}) and before the fix date ({fixed_text})"
        ),
    )


# ---------------------------------------------------------------------------
# Pinned snapshot matching
# ---------------------------------------------------------------------------

def _entity_sources(source: str) -> dict[str, str]:
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return {}
    lines = source.splitlines()
    out: dict[str, str] = {}
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            start = min([node.lineno] + [d.lineno for d in node.decorator_list])
            out[node.name] = "\n".join(lines[start - 1 : node.end_lineno]) + "\n"
    return out


def match_pinned_version(
    pre_fix_files: dict[str, str],
    installed_root: str | Path,
    changed_entities: dict[str, list[str]] | None = None,
) -> bool:
    """True iff every patched file's pre-fix entities appear, denoised-equal,
    in the installed library tree. Unparseable installed files are treated
    as matching (conservative)."""
    root = Path(installed_root)
    for rel_path, pre_source in sorted(pre_fix_files.items()):
        installed_path = root / rel_path
        if not installed_path.exists():
            return False
        installed_source = installed_path.read_text(encoding="utf-8")
        try:
            ast.parse(installed_source)
        except SyntaxError:
            continue  # cannot compare; err toward matching
        pre_entities = _entity_sources(pre_source)
        installed_entities = _entity_sources(installed_source)
        names = (changed_entities or {}).get(rel_path) or sorted(pre_entities)
        for name in names:
            if name not in pre_entities:
                continue
            if name not in installed_entities:
                return False
            try:
                changes = diffcore.denoise(pre_entities[name], installed_entities[name])
            except diffcore.ParseFailure:
                continue
            if changes:
                return False
    return True


# ---------------------------------------------------------------------------
# Risk factor scanning
# ---------------------------------------------------------------------------

def synonym_variants(name: str) -> set[str]:
    """Morphological variants matched in addition to configured synonyms:
    case folding, use_/enable_ prefixes, and trailing version digits."""
    base = name.lower()
    variants = {base}
    stripped = re.sub(r"[_]?v?\d+$", "", base)
    if stripped and stripped != base:
        variants.add(stripped)
    for form in list(variants):
        trimmed = re.sub(r"^(use_|enable_)", "", form)
        variants.add(trimmed)
        variants.add(f"use_{trimmed}")
        variants.add(f"enable_{trimmed}")
    return {v for v in variants if v}


@dataclass(frozen=True)
class _FactorMatcher:
    factor: RiskFactor
    identifier_variants: frozenset[str]
    literal_values: frozenset[str]


def _build_matchers(pattern: DefectPattern) -> list[_FactorMatcher]:
    by_name = {f.name: f for f in pattern.risk_factors}
    matchers = []
    literal_by_factor: dict[str, set[str]] = {}
    for cond in pattern.trigger_conditions:
        if cond.relation is TriggerRelation.EQUALS and cond.value:
            value = cond.value.strip()
            if value.startswith(("'", '"')):
                literal_by_factor.setdefault(cond.subject, set()).add(value[1:-1].lower())
    for name in sorted(by_name):
        factor = by_name[name]
        variants: set[str] = set()
        for token in (factor.name, *factor.synonyms):
            variants |= synonym_variants(token)
        literals = {v.lower() for v in literal_by_factor.get(name, set())}
        if factor.expected_value and factor.expected_value.startswith(("'", '"')):
            literals.add(factor.expected_value[1:-1].lower())
        matchers.append(
            _FactorMatcher(
                factor=factor,
                identifier_variants=frozenset(variants),
                literal_values=frozenset(literals),
            )
        )
    return matchers


def _iter_tokens(tree: ast.Module):
    """Yield (line, token, is_literal) for every matchable occurrence."""
    for node in ast.walk(tree):
        if isinstance(node, ast.Name):
            yield node.lineno, node.id, False
        elif isinstance(node, ast.Attribute):
            yield node.lineno, node.attr, False
        elif isinstance(node, ast.keyword) and node.arg:
            yield node.value.lineno, node.arg, False
        elif isinstance(node, ast.Constant) and isinstance(node.value, str):
            yield node.lineno, node.value, True
        elif isinstance(node, ast.Dict):
            for key in node.keys:
                if isinstance(key, ast.Constant) and isinstance(key.value, str):
                    yield key.lineno, key.value, True


@dataclass
class _ScopeIndex:
    """Line-indexed named scopes of one parsed file."""

    tree: ast.Module
    lines: list[str]

    def scopes_containing(self, line: int) -> list[tuple[str, tuple[int, int]]]:
        """Innermost-first (kind, span) chain of scopes containing the line."""
        chain: list[tuple[str, tuple[int, int], int]] = []

        def visit(node: ast.AST, depth: int) -> None:
            for child in ast.iter_child_nodes(node):
                start = getattr(child, "lineno", None)
                end = getattr(child, "end_lineno", None)
                if start is None or end is None:
                    visit(child, depth)
                    continue
                if start <= line <= end:
                    if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                        chain.append(("function", (start, end), depth))
                    elif isinstance(child, ast.ClassDef):
                        chain.append(("class", (start, end), depth))
                    elif isinstance(
                        child,
                        (ast.If, ast.For, ast.AsyncFor, ast.While, ast.With, ast.AsyncWith, ast.Try),
                    ):
                        chain.append(("enclosing_block", (start, end), depth))
                    visit(child, depth + 1)

        visit(self.tree, 0)
        chain.sort(key=lambda item: item[2], reverse=True)  # innermost first
        return [(kind, span) for kind, span, _ in chain]

    def statement_span(self, line: int) -> tuple[int, int]:
        best: tuple[int, int] | None = None

        def visit(node: ast.AST) -> None:
            nonlocal best
            for child in ast.iter_child_nodes(node):
                start = getattr(child, "lineno", None)
                end = getattr(child, "end_lineno", None)
                if isinstance(child, ast.stmt) and start is not None and end is not None:
                    if start <= line <= end:
                        if best is None or (end - start) < (best[1] - best[0]):
                            best = (start, end)
                visit(child)

        visit(self.tree)
        return best or (line, line)

    def excerpt(self, span: tuple[int, int]) -> str:
        return "\n".join(self.lines[span[0] - 1 : span[1]])

    def module_span(self) -> tuple[int, int]:
        return (1, max(1, len(self.lines)))


def _initial_context(index: _ScopeIndex, file: str, element: MatchedElement, line: int) -> ClientContext:
    """Context at the smallest enclosing named scope: function if any, else
    class, else module."""
    for kind, span in index.scopes_containing(line):
        if kind == "function":
            return ClientContext(
                file=file,
                matched_element=element,
                span=span,
                source_excerpt=index.excerpt(span),
                expansion_level=ExpansionLevel.FUNCTION,
            )
    for kind, span in index.scopes_containing(line):
        if kind == "class":
            return ClientContext(
                file=file,
                matched_element=element,
                span=span,
                source_excerpt=index.excerpt(span),
                expansion_level=ExpansionLevel.CLASS,
            )
    span = index.module_span()
    return ClientContext(
        file=file,
        matched_element=element,
        span=span,
        source_excerpt=index.excerpt(span),
        expansion_level=ExpansionLevel.MODULE,
    )


def iter_client_files(client_root: str | Path):
    root = Path(client_root)
    for path in sorted(root.rglob("*.py")):
        if path.is_file():
            yield path


def scan_for_risk_factors(
    client_root: str | Path, pattern: DefectPattern
) -> list[ClientContext]:
    """Locate every occurrence of a risk factor name, synonym, or trigger
    literal in the client tree; each yields a context at its smallest
    enclosing named scope. Unreadable or unparseable files are skipped."""
    root = Path(client_root)
    matchers = _build_matchers(pattern)
    contexts: list[ClientContext] = []
    for path in iter_client_files(root):
        try:
            source = path.read_text(encoding="utf-8")
            tree = ast.parse(source)
        except (OSError, SyntaxError, UnicodeDecodeError):
            continue
        index = _ScopeIndex(tree=tree, lines=source.splitlines())
        rel = str(path.relative_to(root))
        for line, token, is_literal in sorted(
            _iter_tokens(tree), key=lambda t: (t[0], t[1])
        ):
            folded = token.lower()
            for matcher in matchers:
                matched = (
                    folded in matcher.literal_values
                    if is_literal
                    else folded in matcher.identifier_variants
                )
                if matched:
                    element = MatchedElement(factor=matcher.factor, token=token)
                    contexts.append(_initial_context(index, rel, element, line))
    return contexts


class ContextExhausted(Exception):
    """No broader scope remains above the current context."""


def expand_context(
    context: ClientContext, source: str | None = None, client_root: str | Path | None = None
) -> ClientContext:
    """Return the context one level up (statement -> enclosing_block ->
    function -> class -> module), skipping absent levels; the span strictly
    grows. Raises ContextExhausted at module level."""
    if context.expansion_level is ExpansionLevel.MODULE:
        raise ContextExhausted(context.file)
    if source is None:
        base = Path(client_root) if client_root else Path(".")
        source = (base / context.file).read_text(encoding="utf-8")
    index = _ScopeIndex(tree=ast.parse(source), lines=source.splitlines())
    anchor = context.span[0]
    chain = index.scopes_containing(anchor)

    def strictly_grows(span: tuple[int, int]) -> bool:
        return span[0] <= context.span[0] and span[1] >= context.span[1] and span != context.span

    current_rank = context.expansion_level.rank
    candidates: list[tuple[int, tuple[int, int], ExpansionLevel]] = []
    for kind, span in chain:
        level = ExpansionLevel(kind)
        if level.rank > current_rank and strictly_grows(span):
            candidates.append((level.rank, span, level))
    module_span = index.module_span()
    if strictly_grows(module_span):
        candidates.append((ExpansionLevel.MODULE.rank, module_span, ExpansionLevel.MODULE))
    if not candidates:
        raise ContextExhausted(context.file)
    candidates.sort(key=lambda c: (c[0], c[1][1] - c[1][0]))
    _, span, level = candidates[0]
    return replace(
        context,
        span=span,
        source_excerpt=index.excerpt(span),
        expansion_level=level,
    )


# ---------------------------------------------------------------------------
# Trigger-condition assessment
# ---------------------------------------------------------------------------

def _render_conditions(pattern: DefectPattern) -> str:
    lines = []
    for cond in pattern.trigger_conditions:
        if cond.relation is TriggerRelation.EQUALS:
            desc = f"{cond.subject} == {cond.value}"
        elif cond.relation is TriggerRelation.UNSET:
            desc = f"{cond.subject} is left unset"
        elif cond.relation is TriggerRelation.PRESENT:
            desc = f"{cond.subject} is used"
        elif cond.relation is TriggerRelation.ABSENT:
            desc = f"{cond.subject} is absent"
        else:
            desc = f"environment provides {cond.value or cond.subject}"
        lines.append(f"- [group {cond.group}] {desc}")
    return "\n".join(lines) if lines else "(none)"


def _render_synonyms(pattern: DefectPattern) -> str:
    lines = []
    for factor in pattern.risk_factors:
        if factor.synonyms:
            lines.append(f"- {factor.name}: {', '.join(factor.synonyms)}")
    return "\n".join(lines) if lines else "(none)"


def assess_context(
    context: ClientContext,
    pattern: DefectPattern,
    backend: Backend,
    client_id: str = "",
    memory: list[ImpactJudgement] | None = None,
    feedback: str = "",
    session_log: SessionLog | None = None,
) -> ImpactJudgement:
    """Ask the impact role whether the context satisfies the pattern's
    trigger conditions; one reformat retry on a malformed reply."""
    if not pattern.is_defect:
        raise ValueError("assess_context requires a defect pattern")
    template = load_prompt("impact_v1")
    memory_block = ""
    if memory:
        summaries = "\n".join(
            f"- round {i + 1}: {j.status.value} ({j.reasoning})" for i, j in enumerate(memory)
        )
        memory_block = f"Earlier rounds on this client:\n{summaries}\n\n"
    feedback_block = f"Verifier feedback:\n{feedback}\n\n" if feedback else ""
    prompt = template.format(
        client_ref=client_id or "(client)",
        pattern_ref=pattern.source_id,
        conditions=_render_conditions(pattern),
        synonyms=_render_synonyms(pattern),
        memory=memory_block,
        feedback=feedback_block,
        file=context.file,
        span=f"{context.span[0]}-{context.span[1]}",
        level=context.expansion_level.value,
        excerpt=context.source_excerpt,
    )
    request = CompletionRequest(
        messages=(Message("user", prompt),),
        agent_role="impact",
        task_kind="impact_client",
    )
    text, _ = complete(backend, request, session_log)
    try:
        judgement = parse_structured(text, "impact_judgement")
    except (NoStructuredBlock, MissingKeys):
        retry = CompletionRequest(
            messages=(
                Message("user", prompt),
                Message("assistant", text),
                Message(
                    "user",
                    "Your previous reply was not a valid structured answer. "
                    "Respond again with only the required fenced JSON block.",
                ),
            ),
            agent_role="impact",
            task_kind="impact_client",
        )
        text, _ = complete(backend, retry, session_log)
        judgement = parse_structured(text, "impact_judgement")
    assert isinstance(judgement, ImpactJudgement)
    return judgement


@dataclass(frozen=True)
class AnalysisLimits:
    max_contexts: int = 16
    max_rounds_per_context: int = 3


@dataclass(frozen=True)
class ClientAnalysis:
    affected: bool
    reason: str
    contexts: tuple[ClientContext, ...]
    judgements: tuple[ImpactJudgement, ...]
    satisfied_context: ClientContext | None
    satisfied_judgement: ImpactJudgement | None
    rounds: int


def analyze_client(
    client_root: str | Path,
    pattern: DefectPattern,
    backend: Backend,
    limits: AnalysisLimits | None = None,
    client_id: str = "",
    session_log: SessionLog | None = None,
) -> ClientAnalysis:
    """Scan, then assess each context; uncertain judgements expand the
    context upward and re-assess. The raw verdict is affected iff some
    context reaches satisfied; exhausted-but-uncertain counts as
    unsatisfied. Exposure must already be resolved by the caller."""
    limits = limits or AnalysisLimits()
    contexts = scan_for_risk_factors(client_root, pattern)[: limits.max_contexts]
    if not contexts:
        return ClientAnalysis(
            affected=False,
            reason="no risk-factor usage found in the client tree",
            contexts=(),
            judgements=(),
            satisfied_context=None,
            satisfied_judgement=None,
            rounds=0,
        )
    memory: list[ImpactJudgement] = []
    rounds = 0
    used: list[ClientContext] = []
    for context in contexts:
        current = context
        for _ in range(limits.max_rounds_per_context):
            rounds += 1
            used.append(current)
            judgement = assess_context(
                current,
                pattern,
                backend,
                client_id=client_id,
                memory=memory,
                session_log=session_log,
            )
            memory.append(judgement)
            if judgement.status is JudgementStatus.SATISFIED:
                return ClientAnalysis(
                    affected=True,
                    reason="trigger conditions satisfied",
                    contexts=tuple(used),
                    judgements=tuple(memory),
                    satisfied_context=current,
                    satisfied_judgement=judgement,
                    rounds=rounds,
                )
            if judgement.status is JudgementStatus.UNSATISFIED:
                break
            try:
                current = expand_context(current, client_root=client_root)
            except ContextExhausted:
                break  # uncertain at module level counts as unsatisfied
    return ClientAnalysis(
        affected=False,
        reason="no context satisfied the trigger conditions",
        contexts=tuple(used),
        judgements=tuple(memory),
        satisfied_context=None,
        satisfied_judgement=None,
        rounds=rounds,
    )


def read_observed_date(client_root: str | Path) -> tuple[str, bool]:
    """Client runtime/install date from client_meta.json, else the newest
    file modification time (flagged as a fallback)."""
    root = Path(client_root)
    meta = root / "client_meta.json"
    if meta.exists():
        try:
            data = json.loads(meta.read_text(encoding="utf-8"))
            observed = str(data.get("observed_at", ""))
            if observed:
                return observed, False
        except (json.JSONDecodeError, OSError):
            pass
    import datetime

    newest = 0.0
    for path in root.rglob("*"):
        if path.is_file():
            newest = max(newest, path.stat().st_mtime)
    if newest == 0.0:
        return "", True
    stamp = datetime.datetime.fromtimestamp(newest, tz=datetime.timezone.utc)
    return stamp.date().isoformat(), True
