"""Post-processing verification of impact claims against client syntax
trees, the corrective re-analysis loop, and impact report emission.

A positive verdict survives only when every claimed parameter, call, or
constant can be found by traversing the matched client context; anything
else is retried with feedback and, on exhaustion, conservatively rejected.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .model import (
    ClientContext,
    DefectPattern,
    Evidence,
    ImpactJudgement,
    ImpactReport,
    Justification,
    JudgementStatus,
    VerificationStatus,
)


class VerifyError(Exception):
    pass


class NoClaims(VerifyError):
    """A satisfied judgement cited nothing; treated as verification failure."""


@dataclass(frozen=True)
class Claim:
    identifier: str
    claim_kind: str  # parameter_binding | method_call | constant_use
    binding: str | None = None
    source_context: ClientContext | None = None

    def to_dict(self) -> dict:
        return {
            "identifier": self.identifier,
            "claim_kind": self.claim_kind,
            "binding": self.binding,
        }


@dataclass(frozen=True)
class VerifiedClaim:
    claim: Claim
    file: str
    line: int


def extract_claims(
    judgement: ImpactJudgement, context: ClientContext | None = None
) -> list[Claim]:
    """Turn each cited element into one claim, deduplicated."""
    if judgement.status is not JudgementStatus.SATISFIED:
        raise ValueError("claims are only extracted from satisfied judgements")
    if not judgement.cited_elements:
        raise NoClaims("satisfied judgement cited no elements")
    claims: list[Claim] = []
    seen: set[tuple[str, str | None]] = set()
    for cited in judgement.cited_elements:
        identifier = cited.identifier.strip()
        if not identifier:
            continue
        is_call = identifier.endswith("()")
        identifier = identifier[:-2] if is_call else identifier
        key = (identifier, cited.binding)
        if key in seen:
            continue
        seen.add(key)
        if cited.binding is not None:
            kind = "parameter_binding"
        elif is_call:
            kind = "method_call"
        else:
            kind = "constant_use"
        claims.append(
            Claim(
                identifier=identifier,
                claim_kind=kind,
                binding=cited.binding,
                source_context=context,
            )
        )
    if not claims:
        raise NoClaims("satisfied judgement cited no usable identifiers")
    return claims


def _normalize_literal(text: str) -> str:
    text = re.sub(r"\s+", "", text.strip())
    if text.startswith("'") and text.endswith("'"):
        return f'"{text[1:-1]}"'
    return text


def _literal_of(node: ast.expr) -> str:
    try:
        return _normalize_literal(ast.unparse(node))
    except Exception:
        return ""


def _find_claim(tree: ast.Module, claim: Claim, span: tuple[int, int] | None) -> int | None:
    """Line of the first node inside ``span`` satisfying the claim, else None."""

    def in_span(node: ast.AST) -> bool:
        line = getattr(node, "lineno", None)
        if line is None:
            return False
        return span is None or (span[0] <= line <= span[1])

    want_binding = (
        _normalize_literal(claim.binding) if claim.binding is not None else None
    )
    for node in ast.walk(tree):
        if not in_span(node):
            continue
        if claim.claim_kind == "parameter_binding":
            if isinstance(node, ast.keyword) and node.arg == claim.identifier:
                if want_binding is None or _literal_of(node.value) == want_binding:
                    return node.value.lineno
            if isinstance(node, ast.Assign):
                for target in node.targets:
                    if isinstance(target, ast.Name) and target.id == claim.identifier:
                        if want_binding is None or _literal_of(node.value) == want_binding:
                            return node.lineno
                    if isinstance(target, ast.Attribute) and target.attr == claim.identifier:
                        if want_binding is None or _literal_of(node.value) == want_binding:
                            return node.lineno
        elif claim.claim_kind == "method_call":
            if isinstance(node, ast.Call):
                callee = None
                if isinstance(node.func, ast.Name):
                    callee = node.func.id
                elif isinstance(node.func, ast.Attribute):
                    callee = node.func.attr
                if callee == claim.identifier:
                    return node.lineno
        else:  # constant_use
            if isinstance(node, ast.Name) and node.id == claim.identifier:
                return node.lineno
            if isinstance(node, ast.Attribute) and node.attr == claim.identifier:
                return node.lineno
            if isinstance(node, ast.keyword) and node.arg == claim.identifier:
                return node.value.lineno
            if (
                isinstance(node, ast.Constant)
                and isinstance(node.value, str)
                and node.value == claim.identifier
            ):
                return node.lineno
    return None


def build_client_trees(client_root: str | Path) -> dict[str, tuple[str, ast.Module]]:
    """Parse every client source file once; path keys are root-relative."""
    root = Path(client_root)
    trees: dict[str, tuple[str, ast.Module]] = {}
    for path in sorted(root.rglob("*.py")):
        try:
            source = path.read_text(encoding="utf-8")
            trees[str(path.relative_to(root))] = (source, ast.parse(source))
        except (OSError, SyntaxError, UnicodeDecodeError):
            continue
    return trees


def check_claims(
    claims: list[Claim],
    client_trees: dict[str, tuple[str, ast.Module]],
) -> tuple[list[VerifiedClaim], list[Claim]]:
    """Existence-check each claim against the client's syntax trees.

    A claim bound to a context is searched within that context's span; a
    claim whose file lies outside the scanned client root is automatically
    missing.
    """
    verified: list[VerifiedClaim] = []
    missing: list[Claim] = []
    for claim in claims:
        context = claim.source_context
        if context is not None:
            if context.file not in client_trees:
                missing.append(claim)  # evidence outside the client root
                continue
            _, tree = client_trees[context.file]
            line = _find_claim(tree, claim, context.span)
            if line is not None:
                verified.append(VerifiedClaim(claim=claim, file=context.file, line=line))
            else:
                missing.append(claim)
            continue
        found = False
        for file, (_, tree) in sorted(client_trees.items()):
            line = _find_claim(tree, claim, None)
            if line is not None:
                verified.append(VerifiedClaim(claim=claim, file=file, line=line))
                found = True
                break
        if not found:
            missing.append(claim)
    return verified, missing


@dataclass(frozen=True)
class LoopOutcome:
    is_affected: bool
    verification_status: VerificationStatus
    retries_used: int
    verified: tuple[VerifiedClaim, ...]
    judgement: ImpactJudgement | None
    trace: tuple[str, ...]


def corrective_loop(
    assess: Callable[[str], ImpactJudgement | None],
    claims_pipeline: Callable[[ImpactJudgement], tuple[list[VerifiedClaim], list[Claim]]],
    max_retries: int = 3,
) -> LoopOutcome:
    """Drive verification-gated re-analysis.

    ``assess(feedback)`` produces a judgement (empty feedback on the first
    pass; None means the assessment declined to re-run). Missing claims
    trigger a re-analysis naming them; exhausting retries yields a
    conservative unaffected verdict.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    retries = 0
    feedback = ""
    trace: list[str] = []
    while True:
        judgement = assess(feedback)
        if judgement is None or judgement.status is not JudgementStatus.SATISFIED:
            reason = judgement.reasoning if judgement is not None else "no further assessment"
            trace.append(f"assessment not satisfied: {reason}")
            return LoopOutcome(
                is_affected=False,
                verification_status=VerificationStatus.VERIFIED,
                retries_used=retries,
                verified=(),
                judgement=judgement,
                trace=tuple(trace),
            )
        try:
            verified, missing = claims_pipeline(judgement)
        except NoClaims as exc:
            verified, missing = [], []
            trace.append(str(exc))
            missing_names = []
        else:
            missing_names = sorted({c.identifier for c in missing})
        if not missing_names and verified:
            trace.append(
                "all cited elements confirmed: "
                + ", ".join(f"{v.claim.identifier}@{v.file}:{v.line}" for v in verified)
            )
            return LoopOutcome(
                is_affected=True,
                verification_status=VerificationStatus.VERIFIED,
                retries_used=retries,
                verified=tuple(verified),
                judgement=judgement,
                trace=tuple(trace),
            )
        if missing_names:
            trace.append("unconfirmed elements: " + ", ".join(missing_names))
        if retries >= max_retries:
            trace.append(
                f"evidence still unconfirmed after {retries} retries; "
                "conservatively marking unaffected"
            )
            return LoopOutcome(
                is_affected=False,
                verification_status=VerificationStatus.CONSERVATIVE_REJECT,
                retries_used=retries,
                verified=(),
                judgement=judgement,
                trace=tuple(trace),
            )
        retries += 1
        feedback = (
            "The following cited elements could not be found in the client code: "
            + ", ".join(missing_names or ["(none cited)"])
            + ". Re-examine the code and cite only elements that actually appear."
        )


def emit_report(
    outcome: LoopOutcome,
    pattern: DefectPattern,
    client_id: str,
    extra_reasoning: str = "",
) -> ImpactReport:
    """Assemble the final impact report; always satisfies model invariants."""
    evidence = tuple(
        Evidence(identifier=v.claim.identifier, file=v.file, line=v.line)
        for v in outcome.verified
    )
    reasoning_parts = []
    if extra_reasoning:
        reasoning_parts.append(extra_reasoning)
    if outcome.judgement is not None and outcome.judgement.reasoning:
        reasoning_parts.append(outcome.judgement.reasoning)
    report = ImpactReport(
        client_id=client_id,
        pattern_id=pattern.source_id,
        is_affected=outcome.is_affected and bool(evidence),
        matched_evidence=evidence,
        justification=Justification(
            reasoning=" ".join(reasoning_parts), static_checks=outcome.trace
        ),
        verification_status=outcome.verification_status,
        retries_used=outcome.retries_used,
    )
    return report


def write_report(report: ImpactReport, out_dir: str | Path) -> Path:
    """Write ``reports/<pattern_id>/<client_id>.json`` under ``out_dir``."""
    target = Path(out_dir) / report.pattern_id
    target.mkdir(parents=True, exist_ok=True)
    path = target / f"{report.client_id}.json"
    path.write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path
