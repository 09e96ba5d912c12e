"""End-to-end wiring of the three stages: mining change records into
prefilter decisions, synthesizing defect patterns, and scanning clients.

All functions here are deterministic given a replay store; ablation flags
only remove behavior (flat prompting, fixed-size rounds, unchecked
verdicts, unmapped risk factors)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import clientscan, diffcore, verify
from .agents import (
    Backend,
    CompletionRequest,
    LiveBackend,
    Message,
    MissingKeys,
    NoStructuredBlock,
    RecordingBackend,
    ReplayBackend,
    SessionLog,
    complete,
    empty_extract,
    load_prompt,
    parse_structured,
    progressive_loop,
    render_chunk,
)
from .clientscan import (
    AnalysisLimits,
    ClientAnalysis,
    DefectWindow,
    Exposure,
    read_observed_date,
    resolve_exposure,
)
from .ingest import (
    ConstraintKind,
    FixtureChangeSource,
    IngestError,
    Malformed,
    PrefilterDecision,
    RemoteChangeSource,
    chunk_items,
    parse_dependency_spec,
    prefilter,
)
from .model import (
    ChangeRecord,
    DefectPattern,
    Evidence,
    ExtractRole,
    ImpactReport,
    Justification,
    RecordKind,
    SemanticExtract,
    VerificationStatus,
)
from .orchestrator import (
    CallGraph,
    PublicSurface,
    build_call_graph,
    build_public_surface,
    load_rules,
    required_fields_for,
    validate_completeness,
)


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything one run needs; loadable from JSON with CLI overrides."""

    repo: str = ""
    package: str = "transformers"
    backend: str = "replay"  # replay | live
    endpoint: str = ""
    model: str = ""
    fixtures: str = "fixtures"
    out: str = "out"
    k: int = 3
    max_retries: int = 3
    rules_path: str | None = None
    include_keywords: list[str] = field(default_factory=list)
    exclude_prefixes: list[str] = field(default_factory=list)
    disable_coordination: bool = False
    disable_adaptive_context: bool = False
    disable_verification: bool = False
    disable_domain_mapping: bool = False
    max_contexts: int = 16
    max_rounds_per_context: int = 3
    library_snapshot: str | None = None
    price_per_million_tokens: float = 0.4
    workers: int = 4
    max_item_chars: int = 4000
    token_ceiling: int = 24000
    record: bool = False
    defect_windows: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.backend not in ("replay", "live"):
            raise ConfigError(f"unknown backend kind {self.backend!r}")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})

    def make_backend(self) -> Backend:
        if self.backend == "replay":
            return ReplayBackend(Path(self.fixtures))
        if not self.endpoint or not self.model:
            raise ConfigError("live backend needs endpoint and model")
        live = LiveBackend(self.endpoint, self.model)
        if self.record:
            return RecordingBackend(live, Path(self.fixtures) / "llm")
        return live

    def make_source(self) -> FixtureChangeSource | RemoteChangeSource:
        if self.backend == "replay" or not self.repo:
            return FixtureChangeSource(Path(self.fixtures))
        return RemoteChangeSource(self.repo)

    def limits(self) -> AnalysisLimits:
        return AnalysisLimits(
            max_contexts=self.max_contexts,
            max_rounds_per_context=self.max_rounds_per_context,
        )


def _task_kind(record: ChangeRecord) -> str:
    return (
        "defect_pattern_pr"
        if record.kind is RecordKind.PULL_REQUEST
        else "defect_pattern_commit"
    )


def _load_linked(record: ChangeRecord, source) -> dict[str, ChangeRecord]:
    linked: dict[str, ChangeRecord] = {}
    for linked_id in record.linked_ids:
        try:
            linked[linked_id] = source.load(linked_id)
        except IngestError:
            continue  # links may point outside the fixture corpus
    return linked


def run_mine(
    config: RunConfig, record_ids: list[str]
) -> tuple[dict[str, PrefilterDecision], dict[str, ChangeRecord], dict[str, str]]:
    """Load and prefilter records; per-record failures do not stop the run."""
    source = config.make_source()
    decisions: dict[str, PrefilterDecision] = {}
    records: dict[str, ChangeRecord] = {}
    errors: dict[str, str] = {}
    for record_id in record_ids:
        try:
            record = source.load(record_id)
        except IngestError as exc:
            errors[record_id] = f"{type(exc).__name__}: {exc}"
            continue
        records[record_id] = record
        decisions[record_id] = prefilter(
            record,
            config.include_keywords or None,
            config.exclude_prefixes or None,
        )
    return decisions, records, errors


def patch_changes(record: ChangeRecord) -> list[diffcore.StructuralChange]:
    """Parse and denoise the record's patch, merged in deterministic path order."""
    if not record.patch.strip():
        return []
    try:
        diffs = diffcore.parse_unified_diff(record.patch)
    except diffcore.MalformedDiff:
        return []
    changes: list[diffcore.StructuralChange] = []
    for file_diff in sorted(diffs, key=lambda d: d.path):
        changes.extend(diffcore.diff_file_changes(file_diff))
    return changes


def load_library(config: RunConfig) -> tuple[PublicSurface, CallGraph]:
    rules = load_rules(config.rules_path)
    if config.library_snapshot and Path(config.library_snapshot).is_dir():
        root = Path(config.library_snapshot)
        surface = build_public_surface(root, config_keys=rules.config_keys)
        sources = {}
        for path in sorted(root.rglob("*.py")):
            try:
                sources[str(path.relative_to(root))] = path.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError):
                continue
        graph = build_call_graph(sources)
    else:
        surface = PublicSurface(
            names=frozenset(),
            method_names=frozenset(),
            constructor_params=frozenset(),
            config_keys=rules.config_keys,
        )
        graph = CallGraph(callers={})
    return surface, graph


def _run_flat(
    record: ChangeRecord,
    linked: dict[str, ChangeRecord],
    backend: Backend,
    task_kind: str,
    log: SessionLog,
    token_ceiling: int,
) -> SemanticExtract:
    """Single flat prompt over all content; no coordination, no rounds."""
    from .ingest import metadata_items

    items = metadata_items(record, linked)
    content = "\n\n---\n\n".join(item.text for item in items)
    prompt = load_prompt("flat_v1").format(
        record_ref=f"{record.kind.value} {record.id}",
        content=content,
        patch=record.patch or "(no patch)",
    )
    request = CompletionRequest(
        messages=(Message("user", prompt),), agent_role="flat", task_kind=task_kind
    )
    text, _ = complete(backend, request, log, token_ceiling)
    try:
        parsed = parse_structured(text, "miner_extract")
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
            agent_role="flat",
            task_kind=task_kind,
        )
        text, _ = complete(backend, retry, log, token_ceiling)
        parsed = parse_structured(text, "miner_extract")
    assert isinstance(parsed, SemanticExtract)
    return parsed


def run_pattern(
    config: RunConfig, record_id: str, backend: Backend | None = None
) -> tuple[DefectPattern, SessionLog]:
    """Mine one record through both agent loops and synthesize its pattern."""
    source = config.make_source()
    record = source.load(record_id)
    backend = backend or config.make_backend()
    log = SessionLog()
    rules = load_rules(config.rules_path)
    surface, graph = load_library(config)
    linked = _load_linked(record, source)
    task_kind = _task_kind(record)
    record_ref = f"{record.kind.value} {record.id}"

    from .orchestrator import synthesize_pattern

    if config.disable_coordination:
        miner_extract = _run_flat(
            record, linked, backend, task_kind, log, config.token_ceiling
        )
        codediff_extract = empty_extract(ExtractRole.CODEDIFF)
    else:
        item_chunks = chunk_items(
            record, k=config.k, linked_records=linked, max_item_chars=config.max_item_chars
        )
        miner_chunks = [render_chunk(c) for c in item_chunks]
        if config.disable_adaptive_context:
            miner_chunks = miner_chunks[:1]
        miner_extract, _rounds = progressive_loop(
            ExtractRole.MINER,
            miner_chunks,
            lambda e: validate_completeness(e, required_fields_for("miner")),
            backend,
            max_rounds=1 if config.disable_adaptive_context else None,
            record_ref=record_ref,
            task_kind=task_kind,
            session_log=log,
            token_ceiling=config.token_ceiling,
        )

        changes = patch_changes(record)
        units = diffcore.group_units(changes, k=config.k)
        diff_chunks = [render_chunk(list(u.changes)) for u in units]
        if config.disable_adaptive_context:
            diff_chunks = diff_chunks[:1]
        if diff_chunks:
            codediff_extract, _ = progressive_loop(
                ExtractRole.CODEDIFF,
                diff_chunks,
                lambda e: validate_completeness(e, required_fields_for("codediff")),
                backend,
                max_rounds=1 if config.disable_adaptive_context else None,
                record_ref=record_ref,
                task_kind=task_kind,
                session_log=log,
                token_ceiling=config.token_ceiling,
            )
        else:
            codediff_extract = empty_extract(ExtractRole.CODEDIFF)

    provenance = (record.id, *sorted(linked))
    pattern = synthesize_pattern(
        miner_extract,
        codediff_extract,
        rules,
        surface,
        call_graph=graph,
        source_id=record.id,
        provenance=provenance,
        domain_mapping=not config.disable_domain_mapping,
    )
    return pattern, log


# ---------------------------------------------------------------------------
# Client scan
# ---------------------------------------------------------------------------

def find_dependency(client_root: str | Path, package: str, observed_at: str):
    """Locate the client's requirement line for the library, if any."""
    root = Path(client_root)
    normalized = package.lower().replace("-", "_")
    for name in ("requirements.txt", "requirements.in"):
        req_file = root / name
        if not req_file.exists():
            continue
        for line in req_file.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith(("#", "-")):
                continue
            try:
                spec = parse_dependency_spec(line, observed_at=observed_at)
            except Malformed:
                continue
            if spec.package.lower().replace("-", "_") == normalized:
                return spec
    return None


def defect_window_for(config: RunConfig, pattern: DefectPattern) -> DefectWindow:
    data = config.defect_windows.get(pattern.source_id, {})
    return DefectWindow(
        introduced_version=data.get("introduced_version"),
        fixed_version=data.get("fixed_version"),
        introduced_date=data.get("introduced_date", ""),
        fixed_date=data.get("fixed_date", ""),
    )


def resolve_client_exposure(
    config: RunConfig, pattern: DefectPattern, client_root: str | Path
) -> tuple[Exposure, bool]:
    """Dependency-level exposure plus whether the date fallback fired."""
    observed, fallback = read_observed_date(client_root)
    spec = find_dependency(client_root, config.package, observed)
    window = defect_window_for(config, pattern)
    if spec is None:
        return (
            Exposure(
                verdict="assumed_exposed",
                reason=f"no dependency declaration for {config.package}; assuming exposure",
            ),
            fallback,
        )
    exposure = resolve_exposure(spec, window)
    if (
        exposure.verdict == "exposed"
        and spec.constraint_kind is ConstraintKind.PINNED
        and config.library_snapshot
        and Path(config.library_snapshot).is_dir()
    ):
        pre_fix = _pre_fix_files(config, pattern)
        if pre_fix and not clientscan.match_pinned_version(
            pre_fix, config.library_snapshot
        ):
            exposure = Exposure(
                verdict="not_exposed",
                reason="installed library tree no longer contains the pre-fix entities",
            )
    return exposure, fallback


def _pre_fix_files(config: RunConfig, pattern: DefectPattern) -> dict[str, str]:
    """Pre-fix file texts reconstructed from the source record's patch."""
    patch_path = Path(config.fixtures) / "changes" / f"{pattern.source_id}.patch"
    if not patch_path.exists():
        return {}
    try:
        diffs = diffcore.parse_unified_diff(patch_path.read_text(encoding="utf-8"))
    except diffcore.MalformedDiff:
        return {}
    out: dict[str, str] = {}
    for file_diff in diffs:
        file_diff = diffcore.reconstruct_sources(file_diff)
        if file_diff.old_source is not None:
            out[file_diff.path] = file_diff.old_source
    return out


def _unaffected_report(
    pattern: DefectPattern, client_id: str, reason: str, checks: tuple[str, ...] = ()
) -> ImpactReport:
    return ImpactReport(
        client_id=client_id,
        pattern_id=pattern.source_id,
        is_affected=False,
        matched_evidence=(),
        justification=Justification(reasoning=reason, static_checks=checks),
        verification_status=VerificationStatus.VERIFIED,
        retries_used=0,
    )


def run_scan(
    config: RunConfig,
    pattern: DefectPattern,
    client_root: str | Path,
    backend: Backend | None = None,
) -> tuple[ImpactReport, SessionLog]:
    """Exposure, scan, assessment, verification, report for one client."""
    client_id = Path(client_root).name
    log = SessionLog()

    exposure, date_fallback = resolve_client_exposure(config, pattern, client_root)
    exposure_note = f"exposure: {exposure.verdict} ({exposure.reason})"
    if date_fallback:
        exposure_note += "; observation date from file modification times"

    if exposure.verdict == "not_exposed":
        return _unaffected_report(pattern, client_id, exposure_note), log
    if not pattern.is_defect:
        return (
            _unaffected_report(
                pattern, client_id, f"{exposure_note}; pattern is not a defect"
            ),
            log,
        )

    backend = backend or config.make_backend()
    analysis = clientscan.analyze_client(
        client_root,
        pattern,
        backend,
        limits=config.limits(),
        client_id=client_id,
        session_log=log,
    )

    if config.disable_verification:
        # first judgement accepted unchecked
        if analysis.affected and analysis.satisfied_judgement is not None:
            context = analysis.satisfied_context
            assert context is not None
            evidence = tuple(
                Evidence(
                    identifier=c.identifier.replace("()", ""),
                    file=context.file,
                    line=context.span[0],
                )
                for c in analysis.satisfied_judgement.cited_elements
            )
            report = ImpactReport(
                client_id=client_id,
                pattern_id=pattern.source_id,
                is_affected=bool(evidence),
                matched_evidence=evidence,
                justification=Justification(
                    reasoning=f"{exposure_note}; {analysis.satisfied_judgement.reasoning}",
                    static_checks=("verification disabled; evidence not checked",),
                ),
                verification_status=VerificationStatus.VERIFIED,
                retries_used=0,
            )
            return report, log
        return (
            _unaffected_report(pattern, client_id, f"{exposure_note}; {analysis.reason}"),
            log,
        )

    if not analysis.affected:
        return (
            _unaffected_report(
                pattern,
                client_id,
                f"{exposure_note}; {analysis.reason}",
                checks=tuple(
                    f"round {i + 1}: {j.status.value}" for i, j in enumerate(analysis.judgements)
                ),
            ),
            log,
        )

    trees = verify.build_client_trees(client_root)
    context = analysis.satisfied_context
    assert context is not None and analysis.satisfied_judgement is not None
    memory = list(analysis.judgements)

    def assess_fn(feedback: str):
        if not feedback:
            return analysis.satisfied_judgement
        judgement = clientscan.assess_context(
            context,
            pattern,
            backend,
            client_id=client_id,
            memory=memory,
            feedback=feedback,
            session_log=log,
        )
        memory.append(judgement)
        return judgement

    def claims_fn(judgement):
        claims = verify.extract_claims(judgement, context)
        return verify.check_claims(claims, trees)

    outcome = verify.corrective_loop(assess_fn, claims_fn, max_retries=config.max_retries)
    report = verify.emit_report(outcome, pattern, client_id, extra_reasoning=exposure_note)
    return report, log


def write_summary(out_dir: str | Path) -> Path:
    """Aggregate every report under ``out_dir`` into reports summary JSON."""
    out = Path(out_dir)
    entries = []
    for path in sorted(out.glob("*/*.json")):
        if path.name == "summary.json":
            continue
        data = json.loads(path.read_text(encoding="utf-8"))
        entries.append(
            {
                "pattern_id": data["pattern_id"],
                "client_id": data["client_id"],
                "is_affected": data["is_affected"],
                "verification_status": data["verification_status"],
            }
        )
    entries.sort(key=lambda e: (e["pattern_id"], e["client_id"]))
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps({"verdicts": entries}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return summary_path
