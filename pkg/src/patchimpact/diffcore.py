"""Unified diff parsing and syntax-tree level change denoising.

``denoise`` compares two source texts at the syntax-tree level so that
comment edits, formatting, docstring rewording, and import reordering
produce no changes at all; every surviving difference becomes exactly one
``StructuralChange`` attributed to its innermost named entity.
"""

from __future__ import annotations

import ast
import difflib
import re
import textwrap
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable


class ChangeCategory(str, Enum):
    ENTITY_ADDED = "entity_added"
    ENTITY_REMOVED = "entity_removed"
    CONTROL_FLOW_UPDATE = "control_flow_update"
    VALIDATION_ADDED = "validation_added"
    SIGNATURE_CHANGED = "signature_changed"
    DEFAULT_VALUE_CHANGED = "default_value_changed"
    EXPRESSION_CHANGED = "expression_changed"


class MalformedDiff(Exception):
    """Raised when unified diff text is internally inconsistent."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ParseFailure(Exception):
    """Raised when one side of a denoise comparison is not valid source."""

    def __init__(self, side: str, position: tuple[int, int]):
        super().__init__(f"{side} source failed to parse at {position[0]}:{position[1]}")
        self.side = side
        self.position = position


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: tuple[str, ...]  # each line keeps its leading ' ', '-' or '+'

    def to_dict(self) -> dict[str, Any]:
        return {
            "old_range": [self.old_start, self.old_count],
            "new_range": [self.new_start, self.new_count],
            "lines": list(self.lines),
        }


@dataclass(frozen=True)
class FileDiff:
    old_path: str
    new_path: str
    hunks: tuple[Hunk, ...] = ()
    old_source: str | None = None
    new_source: str | None = None

    @property
    def is_rename(self) -> bool:
        return (
            self.old_path != self.new_path
            and self.old_path != "/dev/null"
            and self.new_path != "/dev/null"
        )

    @property
    def path(self) -> str:
        return self.new_path if self.new_path != "/dev/null" else self.old_path


@dataclass(frozen=True)
class StructuralChange:
    """One semantic difference, attributed to its innermost named entity."""

    file: str
    entity: str  # dotted path of the innermost named definition, or "<module>"
    category: ChangeCategory
    annotation: str = ""
    before_fragment: str = ""
    after_fragment: str = ""
    old_span: tuple[int, int] | None = None
    new_span: tuple[int, int] | None = None
    low_confidence: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "file": self.file,
            "entity": self.entity,
            "category": self.category.value,
            "annotation": self.annotation,
            "before_fragment": self.before_fragment,
            "after_fragment": self.after_fragment,
            "old_span": list(self.old_span) if self.old_span else None,
            "new_span": list(self.new_span) if self.new_span else None,
            "low_confidence": self.low_confidence,
        }


@dataclass(frozen=True)
class PatchUnit:
    """A per-round group of changes, never mixing files."""

    file: str
    changes: tuple[StructuralChange, ...]


_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


def _strip_prefix(path: str) -> str:
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def parse_unified_diff(text: str) -> list[FileDiff]:
    """Parse unified diff text into one FileDiff per file header."""
    lines = text.splitlines()
    diffs: list[FileDiff] = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if line.startswith("--- "):
            old_path = _strip_prefix(line[4:].split("\t")[0].strip())
            if i + 1 >= n or not lines[i + 1].startswith("+++ "):
                raise MalformedDiff("'---' header without matching '+++'", i + 1)
            new_path = _strip_prefix(lines[i + 1][4:].split("\t")[0].strip())
            i += 2
            hunks: list[Hunk] = []
            while i < n and lines[i].startswith("@@"):
                match = _HUNK_RE.match(lines[i])
                if not match:
                    raise MalformedDiff("corrupted @@ range header", i + 1)
                old_start = int(match.group(1))
                old_count = int(match.group(2)) if match.group(2) is not None else 1
                new_start = int(match.group(3))
                new_count = int(match.group(4)) if match.group(4) is not None else 1
                header_line = i + 1
                i += 1
                body: list[str] = []
                seen_old = seen_new = 0
                while i < n:
                    current = lines[i]
                    if current.startswith("\\"):  # "no newline" marker
                        i += 1
                        continue
                    if current.startswith(("@@", "--- ", "diff ")):
                        break
                    if current.startswith("-"):
                        seen_old += 1
                    elif current.startswith("+"):
                        seen_new += 1
                    elif current.startswith(" ") or current == "":
                        seen_old += 1
                        seen_new += 1
                    else:
                        break
                    body.append(current if current else " ")
                    i += 1
                    if seen_old >= old_count and seen_new >= new_count:
                        break
                if seen_old != old_count or seen_new != new_count:
                    raise MalformedDiff(
                        f"hunk body has {seen_old}/{seen_new} lines, "
                        f"header declares {old_count}/{new_count}",
                        header_line,
                    )
                hunks.append(Hunk(old_start, old_count, new_start, new_count, tuple(body)))
            diffs.append(FileDiff(old_path=old_path, new_path=new_path, hunks=tuple(hunks)))
        else:
            i += 1
    return diffs


def reconstruct_sources(diff: FileDiff) -> FileDiff:
    """Rebuild full file texts when the diff covers the whole file.

    Only diffs produced with full context (a single hunk starting at line 1,
    or a pure addition/deletion) are reconstructable; others are returned
    unchanged with sources left as None.
    """
    if diff.old_source is not None or diff.new_source is not None:
        return diff
    if len(diff.hunks) != 1:
        return diff
    hunk = diff.hunks[0]
    if hunk.old_start > 1 or hunk.new_start > 1:
        return diff
    old_lines = [l[1:] for l in hunk.lines if l.startswith((" ", "-"))]
    new_lines = [l[1:] for l in hunk.lines if l.startswith((" ", "+"))]
    old_text = "\n".join(old_lines) + ("\n" if old_lines else "")
    new_text = "\n".join(new_lines) + ("\n" if new_lines else "")
    return replace(diff, old_source=old_text, new_source=new_text)


# ---------------------------------------------------------------------------
# Syntax-tree denoising
# ---------------------------------------------------------------------------

_DEF_NODES = (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)
_IMPORT_NODES = (ast.Import, ast.ImportFrom)
_BLOCK_NODES = (ast.If, ast.For, ast.AsyncFor, ast.While, ast.With, ast.AsyncWith, ast.Try)


def _strip_docstring(body: list[ast.stmt]) -> list[ast.stmt]:
    if (
        body
        and isinstance(body[0], ast.Expr)
        and isinstance(body[0].value, ast.Constant)
        and isinstance(body[0].value.value, str)
    ):
        return body[1:]
    return body


def _normalize_stmt(node: ast.stmt) -> str:
    """Location-free dump used as the comparison key for one statement."""
    if isinstance(node, _DEF_NODES):
        return f"<def:{node.name}>"
    return ast.dump(node, include_attributes=False)


@dataclass
class _Entity:
    qualname: str
    node: ast.AST  # Module, FunctionDef, AsyncFunctionDef or ClassDef
    own_statements: list[ast.stmt] = field(default_factory=list)


def _collect_entities(tree: ast.Module) -> dict[str, _Entity]:
    """Map dotted entity name -> entity, with nested defs owned separately."""
    entities: dict[str, _Entity] = {}

    def visit(node: ast.AST, qualname: str) -> None:
        body = _strip_docstring(list(getattr(node, "body", [])))
        entity = _Entity(qualname=qualname, node=node)
        for stmt in body:
            entity.own_statements.append(stmt)
            if isinstance(stmt, _DEF_NODES):
                visit(stmt, f"{qualname}.{stmt.name}" if qualname != "<module>" else stmt.name)
        entities[qualname] = entity

    visit(tree, "<module>")
    return entities


def _source_span(nodes: list[ast.stmt]) -> tuple[int, int] | None:
    if not nodes:
        return None
    start = min(getattr(n, "lineno", 1) for n in nodes)
    end = max(getattr(n, "end_lineno", getattr(n, "lineno", 1)) for n in nodes)
    # include decorators in the span
    for n in nodes:
        for deco in getattr(n, "decorator_list", []):
            start = min(start, deco.lineno)
    return (start, end)


def _slice_lines(source_lines: list[str], span: tuple[int, int] | None) -> str:
    if span is None:
        return ""
    return "\n".join(source_lines[span[0] - 1 : span[1]])


def _signature_key(node: ast.AST) -> str:
    if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
        parts = [ast.dump(node.args, include_attributes=False)]
        if node.returns is not None:
            parts.append(ast.dump(node.returns, include_attributes=False))
        parts.extend(ast.dump(d, include_attributes=False) for d in node.decorator_list)
        return "|".join(parts)
    if isinstance(node, ast.ClassDef):
        parts = [ast.dump(b, include_attributes=False) for b in node.bases]
        parts.extend(ast.dump(k, include_attributes=False) for k in node.keywords)
        parts.extend(ast.dump(d, include_attributes=False) for d in node.decorator_list)
        return "|".join(parts)
    return ""


def _args_without_defaults(args: ast.arguments) -> str:
    stripped = ast.arguments(
        posonlyargs=args.posonlyargs,
        args=args.args,
        vararg=args.vararg,
        kwonlyargs=args.kwonlyargs,
        kw_defaults=[None] * len(args.kw_defaults),
        kwarg=args.kwarg,
        defaults=[],
    )
    return ast.dump(stripped, include_attributes=False)


def _defaults_only_change(old: ast.AST, new: ast.AST) -> bool:
    if not isinstance(old, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return False
    if not isinstance(new, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return False
    if _args_without_defaults(old.args) != _args_without_defaults(new.args):
        return False
    old_deco = [ast.dump(d, include_attributes=False) for d in old.decorator_list]
    new_deco = [ast.dump(d, include_attributes=False) for d in new.decorator_list]
    return old_deco == new_deco


def _def_header_span(node: ast.AST) -> tuple[int, int]:
    start = node.lineno
    for deco in getattr(node, "decorator_list", []):
        start = min(start, deco.lineno)
    body_start = node.body[0].lineno if getattr(node, "body", None) else node.lineno
    return (start, max(start, body_start - 1))


def denoise(
    old_source: str, new_source: str, file: str = ""
) -> list[StructuralChange]:
    """Diff two source texts, reporting only structural differences.

    Comment edits, whitespace reflow, docstring changes and top-level import
    reordering yield no changes. Raises ParseFailure when either side fails
    to parse; callers fall back to treating the whole file as changed.
    """
    try:
        old_tree = ast.parse(old_source)
    except SyntaxError as exc:
        raise ParseFailure("old", (exc.lineno or 0, exc.offset or 0)) from exc
    try:
        new_tree = ast.parse(new_source)
    except SyntaxError as exc:
        raise ParseFailure("new", (exc.lineno or 0, exc.offset or 0)) from exc

    old_lines = old_source.splitlines()
    new_lines = new_source.splitlines()
    old_entities = _collect_entities(old_tree)
    new_entities = _collect_entities(new_tree)
    changes: list[StructuralChange] = []

    for qualname in sorted(set(old_entities) | set(new_entities)):
        old_entity = old_entities.get(qualname)
        new_entity = new_entities.get(qualname)
        if old_entity is None and new_entity is not None:
            node = new_entity.node
            span = _source_span([node])  # type: ignore[list-item]
            changes.append(
                StructuralChange(
                    file=file,
                    entity=qualname,
                    category=ChangeCategory.ENTITY_ADDED,
                    annotation=_added_entity_note(node),
                    after_fragment=_slice_lines(new_lines, span),
                    new_span=span,
                )
            )
            continue
        if new_entity is None and old_entity is not None:
            node = old_entity.node
            span = _source_span([node])  # type: ignore[list-item]
            changes.append(
                StructuralChange(
                    file=file,
                    entity=qualname,
                    category=ChangeCategory.ENTITY_REMOVED,
                    annotation=_removed_entity_note(node),
                    before_fragment=_slice_lines(old_lines, span),
                    old_span=span,
                )
            )
            continue
        assert old_entity is not None and new_entity is not None
        changes.extend(
            _diff_entity(qualname, old_entity, new_entity, old_lines, new_lines, file)
        )

    changes.sort(key=_change_order)
    return changes


def _change_order(change: StructuralChange) -> tuple:
    span = change.new_span or change.old_span or (0, 0)
    return (change.file, span[0], change.entity, change.category.value)


def _added_entity_note(node: ast.AST) -> str:
    if isinstance(node, ast.ClassDef):
        return "new class definition"
    return "new function definition"


def _removed_entity_note(node: ast.AST) -> str:
    if isinstance(node, ast.ClassDef):
        return "class removed"
    return "function removed"


def _diff_entity(
    qualname: str,
    old_entity: _Entity,
    new_entity: _Entity,
    old_lines: list[str],
    new_lines: list[str],
    file: str,
) -> list[StructuralChange]:
    changes: list[StructuralChange] = []
    old_node, new_node = old_entity.node, new_entity.node

    if qualname == "<module>":
        changes.extend(
            _diff_imports(old_entity.own_statements, new_entity.own_statements,
                          old_lines, new_lines, file)
        )
        old_body = [s for s in old_entity.own_statements if not isinstance(s, _IMPORT_NODES)]
        new_body = [s for s in new_entity.own_statements if not isinstance(s, _IMPORT_NODES)]
    else:
        if _signature_key(old_node) != _signature_key(new_node):
            old_span = _def_header_span(old_node)
            new_span = _def_header_span(new_node)
            if _defaults_only_change(old_node, new_node):
                category, note = ChangeCategory.DEFAULT_VALUE_CHANGED, "default value changed"
            else:
                category, note = ChangeCategory.SIGNATURE_CHANGED, "signature changed"
            changes.append(
                StructuralChange(
                    file=file,
                    entity=qualname,
                    category=category,
                    annotation=note,
                    before_fragment=_slice_lines(old_lines, old_span),
                    after_fragment=_slice_lines(new_lines, new_span),
                    old_span=old_span,
                    new_span=new_span,
                )
            )
        old_body = old_entity.own_statements
        new_body = new_entity.own_statements

    old_keys = [_normalize_stmt(s) for s in old_body]
    new_keys = [_normalize_stmt(s) for s in new_body]
    matcher = difflib.SequenceMatcher(None, old_keys, new_keys, autojunk=False)
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag == "equal":
            continue
        removed = old_body[i1:i2]
        added = new_body[j1:j2]
        old_span = _source_span(removed)
        new_span = _source_span(added)
        category, note = _classify_statement_lists(removed, added)
        changes.append(
            StructuralChange(
                file=file,
                entity=qualname,
                category=category,
                annotation=note,
                before_fragment=_slice_lines(old_lines, old_span),
                after_fragment=_slice_lines(new_lines, new_span),
                old_span=old_span,
                new_span=new_span,
            )
        )
    return changes


def _normalize_import(node: ast.stmt) -> str:
    return ast.dump(node, include_attributes=False)


def _diff_imports(
    old_statements: list[ast.stmt],
    new_statements: list[ast.stmt],
    old_lines: list[str],
    new_lines: list[str],
    file: str,
) -> list[StructuralChange]:
    """Compare top-level imports as a multiset: pure permutation is noise."""
    old_imports = [s for s in old_statements if isinstance(s, _IMPORT_NODES)]
    new_imports = [s for s in new_statements if isinstance(s, _IMPORT_NODES)]
    old_map: dict[str, list[ast.stmt]] = {}
    for node in old_imports:
        old_map.setdefault(_normalize_import(node), []).append(node)
    removed: list[ast.stmt] = []
    added: list[ast.stmt] = []
    for node in new_imports:
        key = _normalize_import(node)
        if old_map.get(key):
            old_map[key].pop()
        else:
            added.append(node)
    for remaining in old_map.values():
        removed.extend(remaining)
    removed.sort(key=lambda n: n.lineno)
    added.sort(key=lambda n: n.lineno)

    changes: list[StructuralChange] = []
    for old_node, new_node in zip(removed, added):
        changes.append(
            StructuralChange(
                file=file,
                entity="<module>",
                category=ChangeCategory.EXPRESSION_CHANGED,
                annotation="import statement changed",
                before_fragment=_slice_lines(old_lines, _source_span([old_node])),
                after_fragment=_slice_lines(new_lines, _source_span([new_node])),
                old_span=_source_span([old_node]),
                new_span=_source_span([new_node]),
            )
        )
    for node in removed[len(added):]:
        changes.append(
            StructuralChange(
                file=file,
                entity="<module>",
                category=ChangeCategory.EXPRESSION_CHANGED,
                annotation="import removed",
                before_fragment=_slice_lines(old_lines, _source_span([node])),
                old_span=_source_span([node]),
            )
        )
    for node in added[len(removed):]:
        changes.append(
            StructuralChange(
                file=file,
                entity="<module>",
                category=ChangeCategory.EXPRESSION_CHANGED,
                annotation="import added",
                after_fragment=_slice_lines(new_lines, _source_span([node])),
                new_span=_source_span([node]),
            )
        )
    return changes


# ---------------------------------------------------------------------------
# Change classification
# ---------------------------------------------------------------------------

def _mentions_none(node: ast.AST) -> bool:
    return any(
        isinstance(sub, ast.Constant) and sub.value is None for sub in ast.walk(node)
    )


def _is_validation(stmt: ast.stmt) -> bool:
    if isinstance(stmt, ast.Assert):
        return True
    if isinstance(stmt, (ast.If, ast.While)):
        return any(isinstance(s, ast.Raise) for s in ast.walk(stmt))
    if isinstance(stmt, ast.Raise):
        return True
    return False


def _validation_note(stmts: list[ast.stmt]) -> str:
    for stmt in stmts:
        if isinstance(stmt, ast.Assert):
            return "added assertion"
        if isinstance(stmt, ast.If) and _mentions_none(stmt.test):
            return "added null check"
    return "added validation check"


def _classify_statement_lists(
    removed: list[ast.stmt], added: list[ast.stmt]
) -> tuple[ChangeCategory, str]:
    if not removed and added:
        if all(isinstance(s, _DEF_NODES) for s in added):
            return ChangeCategory.ENTITY_ADDED, _added_entity_note(added[0])
        if any(_is_validation(s) for s in added):
            return ChangeCategory.VALIDATION_ADDED, _validation_note(added)
        if any(isinstance(s, _BLOCK_NODES) for s in added):
            return ChangeCategory.CONTROL_FLOW_UPDATE, "control flow branch added"
        return ChangeCategory.EXPRESSION_CHANGED, "statement added"

    if removed and not added:
        if all(isinstance(s, _DEF_NODES) for s in removed):
            return ChangeCategory.ENTITY_REMOVED, _removed_entity_note(removed[0])
        if any(isinstance(s, _BLOCK_NODES) for s in removed):
            return ChangeCategory.CONTROL_FLOW_UPDATE, "control flow branch removed"
        return ChangeCategory.EXPRESSION_CHANGED, "statement removed"

    if len(removed) == 1 and len(added) == 1:
        return _classify_pair(removed[0], added[0])

    if any(_is_validation(s) for s in added) and not any(_is_validation(s) for s in removed):
        return ChangeCategory.VALIDATION_ADDED, _validation_note(added)
    if any(isinstance(s, _BLOCK_NODES) for s in removed + added):
        return ChangeCategory.CONTROL_FLOW_UPDATE, "control flow updated"
    return ChangeCategory.EXPRESSION_CHANGED, "statements updated"


def _call_kwarg_only_change(old: ast.expr, new: ast.expr) -> bool:
    if not (isinstance(old, ast.Call) and isinstance(new, ast.Call)):
        return False
    if ast.dump(old.func, include_attributes=False) != ast.dump(
        new.func, include_attributes=False
    ):
        return False
    old_args = [ast.dump(a, include_attributes=False) for a in old.args]
    new_args = [ast.dump(a, include_attributes=False) for a in new.args]
    return old_args == new_args


def _classify_pair(old: ast.stmt, new: ast.stmt) -> tuple[ChangeCategory, str]:
    if isinstance(old, (ast.FunctionDef, ast.AsyncFunctionDef)) and isinstance(
        new, (ast.FunctionDef, ast.AsyncFunctionDef)
    ):
        if _defaults_only_change(old, new):
            return ChangeCategory.DEFAULT_VALUE_CHANGED, "default value changed"
        return ChangeCategory.SIGNATURE_CHANGED, "signature changed"

    if type(old) is not type(new):
        if _is_validation(new) and not _is_validation(old):
            return ChangeCategory.VALIDATION_ADDED, _validation_note([new])
        if isinstance(old, _BLOCK_NODES) or isinstance(new, _BLOCK_NODES):
            return ChangeCategory.CONTROL_FLOW_UPDATE, "control flow updated"
        return ChangeCategory.EXPRESSION_CHANGED, "statement replaced"

    if isinstance(old, (ast.If, ast.While)) and isinstance(new, (ast.If, ast.While)):
        if ast.dump(old.test, include_attributes=False) != ast.dump(
            new.test, include_attributes=False
        ):
            return ChangeCategory.CONTROL_FLOW_UPDATE, "modified branch condition"
        if not _is_validation(old) and _is_validation(new):
            return ChangeCategory.VALIDATION_ADDED, _validation_note([new])
        return ChangeCategory.CONTROL_FLOW_UPDATE, "branch body updated"
    if isinstance(old, (ast.For, ast.AsyncFor)):
        return ChangeCategory.CONTROL_FLOW_UPDATE, "loop updated"
    if isinstance(old, (ast.Try, ast.With, ast.AsyncWith)):
        return ChangeCategory.CONTROL_FLOW_UPDATE, "control flow updated"

    old_value = getattr(old, "value", None)
    new_value = getattr(new, "value", None)
    if isinstance(old, (ast.Assign, ast.AugAssign, ast.AnnAssign, ast.Expr, ast.Return)):
        if (
            old_value is not None
            and new_value is not None
            and _call_kwarg_only_change(old_value, new_value)
        ):
            return ChangeCategory.EXPRESSION_CHANGED, "call arguments changed"
        if isinstance(old, ast.Return):
            return ChangeCategory.EXPRESSION_CHANGED, "return value changed"
        return ChangeCategory.EXPRESSION_CHANGED, "expression updated"

    return ChangeCategory.EXPRESSION_CHANGED, "statement updated"


def _parse_fragment(fragment: str) -> list[ast.stmt] | None:
    if not fragment.strip():
        return []
    try:
        return ast.parse(textwrap.dedent(fragment)).body
    except SyntaxError:
        return None


def classify_change(change: StructuralChange) -> StructuralChange:
    """Finalize category and annotation from the change's fragments."""
    removed = _parse_fragment(change.before_fragment)
    added = _parse_fragment(change.after_fragment)
    if removed is None or added is None:
        return replace(
            change,
            category=ChangeCategory.EXPRESSION_CHANGED,
            annotation=change.annotation or "unparseable fragment",
        )
    category, note = _classify_statement_lists(removed, added)
    return replace(change, category=category, annotation=note)


# ---------------------------------------------------------------------------
# Diff-only fallback and grouping
# ---------------------------------------------------------------------------

_COMMENT_RE = re.compile(r"^\s*(#|$)")


def denoise_lines(diff: FileDiff) -> list[StructuralChange]:
    """Line-level fallback when full file texts are unavailable.

    Filters comment-only and blank-line edits; each surviving contiguous
    edited run becomes one low-confidence change.
    """
    changes: list[StructuralChange] = []
    for hunk in diff.hunks:
        removed: list[str] = []
        added: list[str] = []

        def flush() -> None:
            meaningful_removed = [l for l in removed if not _COMMENT_RE.match(l)]
            meaningful_added = [l for l in added if not _COMMENT_RE.match(l)]
            if meaningful_removed or meaningful_added:
                changes.append(
                    StructuralChange(
                        file=diff.path,
                        entity="<module>",
                        category=ChangeCategory.EXPRESSION_CHANGED,
                        annotation="line-level change",
                        before_fragment="\n".join(meaningful_removed),
                        after_fragment="\n".join(meaningful_added),
                        low_confidence=True,
                    )
                )
            removed.clear()
            added.clear()

        for line in hunk.lines:
            if line.startswith("-"):
                removed.append(line[1:])
            elif line.startswith("+"):
                added.append(line[1:])
            else:
                if removed or added:
                    flush()
        if removed or added:
            flush()
    return changes


def group_units(
    changes: Iterable[StructuralChange], k: int = 3
) -> list[PatchUnit]:
    """Group changes into per-round units of at most k, never mixing files."""
    if k < 1:
        raise ValueError("k must be >= 1")
    units: list[PatchUnit] = []
    run: list[StructuralChange] = []
    run_file: str | None = None

    def flush_run() -> None:
        nonlocal run, run_file
        for start in range(0, len(run), k):
            chunk = run[start : start + k]
            units.append(PatchUnit(file=chunk[0].file, changes=tuple(chunk)))
        run = []
        run_file = None

    for change in changes:
        if run_file is not None and change.file != run_file:
            flush_run()
        run.append(change)
        run_file = change.file
    if run:
        flush_run()
    return units


def diff_file_changes(diff: FileDiff) -> list[StructuralChange]:
    """Denoise one FileDiff, using sources when available, else line fallback.

    On a parse failure the whole file is conservatively reported as one
    expression change.
    """
    diff = reconstruct_sources(diff)
    if diff.old_source is not None and diff.new_source is not None:
        try:
            return denoise(diff.old_source, diff.new_source, file=diff.path)
        except ParseFailure:
            return [
                StructuralChange(
                    file=diff.path,
                    entity="<module>",
                    category=ChangeCategory.EXPRESSION_CHANGED,
                    annotation="file changed (parse failure)",
                    before_fragment=diff.old_source,
                    after_fragment=diff.new_source,
                    low_confidence=True,
                )
            ]
    return denoise_lines(diff)
