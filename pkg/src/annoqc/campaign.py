"""Batch review of a whole annotation campaign.

``run_qc`` drives one pass over many annotation documents: validate, gate,
measure, aggregate, write reports, and (optionally) file issues for every
threshold breach.  Per-document work is pure and side-effect free, so it
parallelizes across processes while the merged output stays byte-identical
to a single-process run.  ``workload_split`` deals cases to teams.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass, field
from datetime import datetime
from itertools import combinations
from pathlib import Path

from .annostore import BoxScope, group_into_boxes, load_annotations
from .cellagreement import ConcordanceStats, concordance, match_points, radius_px
from .geometry import BinaryMask
from .issuelog import Issue, IssueLog, auto_file_issues
from .protocol import UNKNOWN_CELL, Protocol, Violation, validate_elements
from .qcmetrics import (
    BoxMetrics,
    CompletenessVerdict,
    ProjectSummary,
    box_rows_csv,
    cell_summary_csv,
    check_completeness,
    compute_box_metrics,
    construct_usage_csv,
    region_summary_csv,
    summarize,
    summary_to_doc,
    timeline_csv,
)


@dataclass
class PairAgreement:
    annotator_a: str
    annotator_b: str
    stats: ConcordanceStats


@dataclass
class CellBoxAgreement:
    box_id: str
    construct: str
    pairs: list[PairAgreement] = field(default_factory=list)


@dataclass
class WsiReport:
    wsi: str
    case: str
    source: str
    gated: bool
    violations: list[Violation]
    completeness: CompletenessVerdict | None
    metrics: list[BoxMetrics]
    cell_agreement: list[CellBoxAgreement]
    findings: list[dict]

    @property
    def clean(self) -> bool:
        return not self.findings


@dataclass
class QcRunResult:
    reports: list[WsiReport]
    summary: ProjectSummary
    new_issues: list[Issue] = field(default_factory=list)

    @property
    def findings(self) -> list[dict]:
        out = []
        for report in self.reports:
            out.extend(report.findings)
        return out


def _cell_points(scope: BoxScope, protocol: Protocol):
    """Per annotator: point list and id->class map for cell-level members."""
    styles = protocol.style_by_name()
    cell_names = {c.name for c in protocol.cell_types}
    per: dict[str, tuple[list, dict]] = {}
    for annotator in scope.annotators():
        points, classes = [], {}
        for el in scope.members[annotator]:
            if el.shape != "point":
                continue
            style = styles.get(el.style)
            if style is None or style.type_name not in cell_names:
                continue
            x, y = el.coords[0]
            points.append((el.id, x, y))
            classes[el.id] = style.type_name
        if points:
            per[annotator] = (points, classes)
    return per


def _box_cell_agreement(
    scope: BoxScope, protocol: Protocol, mpp: float
) -> CellBoxAgreement | None:
    per = _cell_points(scope, protocol)
    if len(per) < 2:
        return None
    radius = radius_px(protocol.thresholds.match_radius_um, mpp)
    pairs = []
    for a, b in combinations(sorted(per), 2):
        pts_a, cls_a = per[a]
        pts_b, cls_b = per[b]
        result = match_points(pts_a, pts_b, radius)
        stats = concordance(result, cls_a, cls_b, unknown_class=UNKNOWN_CELL)
        pairs.append(PairAgreement(a, b, stats))
    return CellBoxAgreement(scope.box.id, scope.construct.name, pairs)


def _exhaustiveness_findings(
    wsi: str, metrics: list[BoxMetrics], protocol: Protocol
) -> list[dict]:
    t = protocol.thresholds
    out = []
    for m in metrics:
        construct = protocol.construct_by_name()[m.construct]
        if not construct.exhaustive:
            continue
        threshold = (
            t.exhaustiveness_threshold
            if m.consensus
            else t.exhaustiveness_threshold_individual
        )
        if m.exhaustiveness < threshold:  # strict: hitting the bar passes
            note = ", box has no region annotations" if m.empty_box else ""
            out.append(
                {
                    "wsi": wsi,
                    "metric": "exhaustiveness",
                    "box": m.box_id,
                    "message": (
                        f"{m.construct} coverage {m.exhaustiveness:.3f}"
                        f" below {threshold:.2f}{note}"
                    ),
                }
            )
    return out


def _load_tissue(
    path: str | None, width_px: int, thumb_path: str | None = None
) -> BinaryMask | None:
    """Tissue mask from a PBM file, or derived from a thumbnail image when
    no precomputed mask exists.  The grid step is inferred from the base
    width, so masks at any scale line up with the slide."""
    if path is not None:
        mask = BinaryMask.from_pbm(Path(path).read_bytes())
        if mask.width == 0:
            return None
        ds = max(1.0, round(width_px / mask.width))
        return BinaryMask(mask.width, mask.height, ds, (0.0, 0.0), mask.data)
    if thumb_path is not None:
        from .imageqc import load_thumbnail, tissue_from_thumbnail

        thumb = load_thumbnail(thumb_path)
        ds = max(1.0, round(width_px / thumb.pixels.shape[1]))
        mask = tissue_from_thumbnail(thumb)
        return BinaryMask(mask.width, mask.height, ds, (0.0, 0.0), mask.data)
    return None


def _process_wsi(job: tuple) -> tuple[WsiReport, ProjectSummary | None]:
    """Pure per-document worker; must stay picklable for process pools.

    Returns the report plus this document's share of the project summary
    (None when the document is gated), so the parent never re-reads files.
    """
    path, protocol, downsample, tissue_path, thumb_path, force_all, any_type = job
    meta, elements = load_annotations(path)
    violations = validate_elements(meta, elements, protocol)
    gated = bool(violations) and not force_all

    findings: list[dict] = []
    if violations:
        findings.append(
            {
                "wsi": meta.id,
                "metric": "validation",
                "box": None,
                "message": f"{len(violations)} invalid elements, see report",
            }
        )

    completeness = None
    metrics: list[BoxMetrics] = []
    cell_agreement: list[CellBoxAgreement] = []
    if not gated:
        scopes = sorted(group_into_boxes(elements, protocol), key=lambda s: s.box.id)
        completeness = check_completeness(scopes, protocol)
        if not completeness.passed:
            shortfall = "; ".join(
                f"{m.construct} {m.found}/{m.required}"
                for m in completeness.missing
            )
            findings.append(
                {
                    "wsi": meta.id,
                    "metric": "completeness",
                    "box": None,
                    "message": f"required boxes missing: {shortfall}",
                }
            )
        # an incomplete document never reaches the later review stages
        if completeness.passed or force_all:
            tissue = _load_tissue(tissue_path, meta.width_px, thumb_path)
            for scope in scopes:
                if scope.construct.scope == "region":
                    metrics.append(
                        compute_box_metrics(
                            scope, protocol, meta.mpp,
                            tissue=tissue, downsample=downsample,
                            any_type=any_type,
                        )
                    )
                elif scope.construct.consensus:
                    agreement = _box_cell_agreement(scope, protocol, meta.mpp)
                    if agreement is not None:
                        cell_agreement.append(agreement)
            findings.extend(_exhaustiveness_findings(meta.id, metrics, protocol))

    report = WsiReport(
        wsi=meta.id,
        case=meta.case_id,
        source=Path(path).name,
        gated=gated,
        violations=violations,
        completeness=completeness,
        metrics=metrics,
        cell_agreement=cell_agreement,
        findings=findings,
    )
    doc_summary = None
    if not gated:
        doc_summary = summarize(
            [(meta, elements)],
            protocol,
            box_metrics={meta.id: metrics} if metrics else None,
        )
    return report, doc_summary


def discover_documents(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.json"))


def _find_file(directory, stem: str, suffix: str) -> str | None:
    if directory is None:
        return None
    candidate = Path(directory) / f"{stem}{suffix}"
    return str(candidate) if candidate.exists() else None


def run_qc(
    protocol: Protocol,
    doc_paths,
    out_dir=None,
    jobs: int = 1,
    downsample: int | None = None,
    date: datetime | None = None,
    journal=None,
    tissue_dir=None,
    thumbnails_dir=None,
    force_all: bool = False,
    any_type: bool = False,
) -> QcRunResult:
    """Review every document and merge the results.

    Staging per document: parse, validate, completeness; only documents
    passing all three get coverage, diversity and agreement computed.
    Validation failures quarantine the document entirely; completeness
    failures skip the later stages but stay in the project summary.
    ``force_all`` overrides both gates for exploratory runs.  With
    ``journal`` set, one issue per new finding is filed (``date`` is then
    mandatory; runs never read the wall clock).  ``jobs`` > 1 fans the
    per-document work out to processes without changing any output byte.
    Tissue denominators come from ``tissue_dir`` PBM masks when present,
    else are computed from ``thumbnails_dir`` PNG images.
    """
    paths = [str(p) for p in doc_paths]
    if journal is not None and date is None:
        raise ValueError("filing issues needs an explicit date")

    jobs_list = []
    for path in paths:
        stem = Path(path).stem
        tissue_path = _find_file(tissue_dir, stem, ".pbm")
        thumb_path = None
        if tissue_path is None:
            thumb_path = _find_file(thumbnails_dir, stem, ".png")
        jobs_list.append(
            (path, protocol, downsample, tissue_path, thumb_path,
             force_all, any_type)
        )

    if jobs > 1 and len(jobs_list) > 1:
        with multiprocessing.Pool(processes=jobs) as pool:
            outcomes = pool.map(_process_wsi, jobs_list)
    else:
        outcomes = [_process_wsi(job) for job in jobs_list]

    outcomes.sort(key=lambda pair: pair[0].wsi)
    reports = [report for report, _ in outcomes]
    seen: dict[str, str] = {}
    for report in reports:
        if report.wsi in seen:
            raise ValueError(
                f"duplicate wsi id {report.wsi!r}"
                f" in {seen[report.wsi]} and {report.source}"
            )
        seen[report.wsi] = report.source

    summary = ProjectSummary()
    for _, doc_summary in outcomes:
        if doc_summary is not None:
            summary = summary.merge(doc_summary)

    new_issues: list[Issue] = []
    if journal is not None:
        log = journal if isinstance(journal, IssueLog) else IssueLog(journal)
        findings = sorted(
            (f for r in reports for f in r.findings),
            key=lambda f: (f["wsi"], f["metric"], f["box"] or ""),
        )
        new_issues = auto_file_issues(log, findings, date)

    result = QcRunResult(reports=reports, summary=summary, new_issues=new_issues)
    if out_dir is not None:
        write_outputs(result, protocol, out_dir)
    return result


def _write_atomic(path: Path, payload) -> None:
    """No reader ever sees a half-written report."""
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(payload, bytes):
        tmp.write_bytes(payload)
    else:
        tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, path)


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def report_to_doc(report: WsiReport) -> dict:
    doc = {
        "wsi": report.wsi,
        "case": report.case,
        "source": report.source,
        "gated": report.gated,
        "violations": [
            {"element": v.element_id, "kind": v.kind, "detail": v.detail}
            for v in report.violations
        ],
        "completeness": None,
        "boxes": [],
        "cell_agreement": [],
        "findings": report.findings,
    }
    if report.completeness is not None:
        doc["completeness"] = {
            "passed": report.completeness.passed,
            "missing": [
                {
                    "construct": m.construct,
                    "required": m.required,
                    "found": m.found,
                    "required_annotators": m.required_annotators,
                    "found_annotators": m.found_annotators,
                }
                for m in report.completeness.missing
            ],
        }
    for m in report.metrics:
        doc["boxes"].append(
            {
                "box": m.box_id,
                "construct": m.construct,
                "consensus": m.consensus,
                "exhaustiveness": round(m.exhaustiveness, 6),
                "diversity": m.diversity,
                "empty": m.empty_box,
                "agreement": [
                    {
                        "type": a.type_name,
                        "jaccard": round(a.jaccard, 6),
                        "dice": round(a.dice, 6),
                        "union_area_mm2": round(a.union_area_mm2, 6),
                        "both_empty": a.both_empty,
                    }
                    for a in m.agreement
                ],
            }
        )
    for c in report.cell_agreement:
        doc["cell_agreement"].append(
            {
                "box": c.box_id,
                "construct": c.construct,
                "pairs": [
                    {
                        "a": p.annotator_a,
                        "b": p.annotator_b,
                        "n_a": p.stats.n_a,
                        "n_b": p.stats.n_b,
                        "matched": p.stats.matched,
                        "agreed": p.stats.agreed,
                        "disagreed": p.stats.disagreed,
                        "missed_a": p.stats.missed_a,
                        "missed_b": p.stats.missed_b,
                        "excluded_unknown": p.stats.excluded_unknown,
                        "agreed_fraction": round(p.stats.agreed_fraction(), 6),
                    }
                    for p in c.pairs
                ],
            }
        )
    return doc


def write_outputs(result: QcRunResult, protocol: Protocol, out_dir) -> None:
    out = Path(out_dir)
    reports_dir = out / "reports"
    csv_dir = out / "csv"
    reports_dir.mkdir(parents=True, exist_ok=True)
    csv_dir.mkdir(parents=True, exist_ok=True)
    for report in result.reports:
        _write_atomic(reports_dir / f"{report.wsi}.json", _dump(report_to_doc(report)))
    _write_atomic(out / "summary.json", _dump(summary_to_doc(result.summary, protocol)))
    _write_atomic(csv_dir / "regions.csv", region_summary_csv(result.summary, protocol))
    _write_atomic(csv_dir / "cells.csv", cell_summary_csv(result.summary, protocol))
    _write_atomic(
        csv_dir / "constructs.csv", construct_usage_csv(result.summary, protocol)
    )
    _write_atomic(csv_dir / "timeline.csv", timeline_csv(result.summary, protocol))
    _write_atomic(csv_dir / "boxes.csv", box_rows_csv(result.summary))


@dataclass
class WorkloadAssignment:
    teams: list[str]
    cases: dict[str, list[str]]  # team -> case ids, in assignment order
    loads: dict[str, float]

    @property
    def max_load(self) -> float:
        return max(self.loads.values())

    @property
    def min_load(self) -> float:
        return min(self.loads.values())

    def to_rows(self) -> list[list]:
        rows = [["team", "case"]]
        for team in self.teams:
            for case in self.cases[team]:
                rows.append([team, case])
        return rows


def workload_split(efforts: dict[str, float], teams) -> WorkloadAssignment:
    """Longest-processing-time deal of cases onto teams.

    Cases are placed heaviest-first onto the least-loaded team; every tie
    (equal effort, equal load) breaks by name, so the result is a pure
    function of its inputs.
    """
    if isinstance(teams, int):
        if teams < 1:
            raise ValueError("need at least one team")
        team_names = [f"team{i + 1}" for i in range(teams)]
    else:
        team_names = list(teams)
        if not team_names or len(set(team_names)) != len(team_names):
            raise ValueError("team names must be unique and non-empty")
    for case, effort in efforts.items():
        if effort < 0:
            raise ValueError(f"negative effort for {case!r}")

    order = sorted(efforts.items(), key=lambda kv: (-kv[1], kv[0]))
    cases: dict[str, list[str]] = {t: [] for t in team_names}
    loads: dict[str, float] = {t: 0.0 for t in team_names}
    for case, effort in order:
        target = min(team_names, key=lambda t: (loads[t], team_names.index(t)))
        cases[target].append(case)
        loads[target] += effort
    return WorkloadAssignment(teams=team_names, cases=cases, loads=loads)
