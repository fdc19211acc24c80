"""Command line front end.

Exit codes: 0 clean, 1 for findings where the command's job is a verdict
(validate, imageqc), 2 hard error.  A qc run that merely finds quality
problems still exits 0: the findings land in reports and issues, and only
infrastructure failures are nonzero.  Machine-readable output (TSV, JSON,
CSV) goes to stdout; progress and human summaries go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import campaign, imageqc, qcmetrics
from .annostore import (
    DocumentError,
    import_point_csv,
    import_xml_polygons,
    load_annotations,
    parse_timestamp,
    save_annotations,
    WsiMetadata,
)
from .issuelog import IssueError, IssueLog
from .protocol import (
    ProtocolError,
    default_protocol,
    load_protocol,
    validate_elements,
)

OK, FINDINGS, ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _parse_date(text: str) -> datetime:
    """Accept a full timestamp or a bare date (midnight UTC)."""
    try:
        return parse_timestamp(text)
    except DocumentError:
        pass
    try:
        day = datetime.strptime(text, "%Y-%m-%d")
    except ValueError:
        raise CliError(
            f"cannot read date {text!r}; use YYYY-MM-DD or an ISO timestamp"
        ) from None
    return day.replace(tzinfo=timezone.utc)


def _load_proto(args):
    protocol = (
        default_protocol() if args.protocol is None else load_protocol(args.protocol)
    )
    overrides = {}
    if getattr(args, "match_radius_um", None) is not None:
        overrides["match_radius_um"] = args.match_radius_um
    if getattr(args, "exhaustiveness_threshold", None) is not None:
        overrides["exhaustiveness_threshold"] = args.exhaustiveness_threshold
    if overrides:
        protocol = replace(
            protocol, thresholds=replace(protocol.thresholds, **overrides)
        )
    return protocol


def _doc_paths(args) -> list[Path]:
    entries = list(args.annotations or [])
    entries.extend(getattr(args, "annotations_opt", None) or [])
    paths: list[Path] = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            paths.extend(campaign.discover_documents(p))
        else:
            paths.append(p)
    return paths


def _info(text: str) -> None:
    print(text, file=sys.stderr)


def cmd_validate(args) -> int:
    protocol = _load_proto(args)
    total = 0
    for path in _doc_paths(args):
        meta, elements = load_annotations(path)
        violations = validate_elements(meta, elements, protocol)
        for v in violations:
            print(f"{meta.id}\t{v.element_id}\t{v.kind}\t{v.detail}")
        total += len(violations)
    _info(f"{total} violations")
    return FINDINGS if total else OK


def cmd_qc(args) -> int:
    protocol = _load_proto(args)
    result = campaign.run_qc(
        protocol,
        _doc_paths(args),
        out_dir=args.out,
        jobs=args.jobs,
        downsample=args.downsample,
        date=_parse_date(args.date) if args.date else None,
        journal=args.journal,
        tissue_dir=args.tissue_dir,
        thumbnails_dir=args.thumbnails,
        force_all=args.force_all,
        any_type=args.any_type,
    )
    for finding in result.findings:
        locator = finding["box"] or "-"
        print(
            f"{finding['wsi']}\t{finding['metric']}\t{locator}\t{finding['message']}"
        )
    _info(f"{len(result.findings)} findings across {len(result.reports)} documents")
    if args.journal:
        _info(f"{len(result.new_issues)} new issues filed")
    return OK  # quality findings are reported, not treated as failures


def cmd_imageqc(args) -> int:
    thumb = imageqc.load_thumbnail(args.image, args.downsample, args.mpp)
    params = imageqc.ImageQcParams(tile_px=args.tile_px)
    result = imageqc.run_imageqc(thumb, params, reject_fraction=args.blur_threshold)
    doc = imageqc.result_to_doc(result)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(
            json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        (out / "tissue.pbm").write_bytes(result.tissue.to_pbm())
        (out / "pen.pbm").write_bytes(result.pen.to_pbm())
        (out / "coverslip.pbm").write_bytes(result.coverslip.to_pbm())
        imageqc.overlay_png(thumb, result).save(out / "overlay.png")
    reason = f" ({result.reason})" if result.reason else ""
    _info(
        f"{result.decision}{reason}: blurry fraction"
        f" {result.blurry_fraction:.3f} over {result.counted_tiles} tiles"
    )
    return OK if result.decision == "accept" else FINDINGS


def cmd_agreement(args) -> int:
    protocol = _load_proto(args)
    report, _ = campaign._process_wsi(
        (str(args.annotations[0]), protocol, args.downsample, None, None,
         True, False)
    )
    doc = campaign.report_to_doc(report)
    payload = {
        "wsi": doc["wsi"],
        "boxes": [
            b for b in doc["boxes"]
            if args.box is None or b["box"] == args.box
        ],
        "cell_agreement": [
            c for c in doc["cell_agreement"]
            if args.box is None or c["box"] == args.box
        ],
    }
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    return OK


def _meta_from_args(args) -> WsiMetadata:
    return WsiMetadata(
        id=args.wsi_id,
        case_id=args.case,
        stain=args.stain,
        width_px=args.width,
        height_px=args.height,
        mpp=args.mpp,
        label=args.label,
    )


def cmd_convert(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    mapping = None
    if args.mapping:
        mapping = json.loads(Path(args.mapping).read_text(encoding="utf-8"))
    if args.format == "xml-polygons":
        if not args.annotator or not args.created:
            raise CliError("xml-polygons needs --annotator and --created")
        elements = import_xml_polygons(
            text,
            annotator=args.annotator,
            created=_parse_date(args.created),
            style_map=mapping,
        )
    else:  # point-csv
        elements = import_point_csv(
            text, style_map=mapping, protocol=_load_proto(args)
        )
    save_annotations(args.out, _meta_from_args(args), elements)
    _info(f"{len(elements)} elements written to {args.out}")
    return OK


def cmd_report(args) -> int:
    protocol = _load_proto(args)
    docs = [load_annotations(p) for p in _doc_paths(args)]
    docs.sort(key=lambda pair: pair[0].id)
    summary = qcmetrics.summarize(docs, protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(
        json.dumps(qcmetrics.summary_to_doc(summary, protocol), indent=2,
                   ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (out / "regions.csv").write_text(
        qcmetrics.region_summary_csv(summary, protocol), encoding="utf-8"
    )
    (out / "cells.csv").write_text(
        qcmetrics.cell_summary_csv(summary, protocol), encoding="utf-8"
    )
    (out / "constructs.csv").write_text(
        qcmetrics.construct_usage_csv(summary, protocol), encoding="utf-8"
    )
    (out / "timeline.csv").write_text(
        qcmetrics.timeline_csv(summary, protocol), encoding="utf-8"
    )
    _info(f"summary of {summary.n_wsis} documents written to {out}")
    return OK


def cmd_workload(args) -> int:
    # missing effort cells fall back to the number of boxes the
    # dictionary requires per case
    default_effort = float(
        sum(r.min_count for r in _load_proto(args).completeness_rules)
    )
    efforts: dict[str, float] = {}
    with open(args.cases, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            case = row.get("case")
            if case in (None, ""):
                raise CliError("cases file needs a 'case' column")
            raw = (row.get("effort") or "").strip()
            if not raw:
                efforts[case] = default_effort
                continue
            try:
                efforts[case] = float(raw)
            except ValueError:
                raise CliError(
                    f"effort for case {case!r} is not a number"
                ) from None
    teams = args.teams
    if teams.isdigit():
        split = campaign.workload_split(efforts, int(teams))
    else:
        split = campaign.workload_split(efforts, teams.split(","))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(split.to_rows())
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    for team in split.teams:
        _info(f"# {team}: {len(split.cases[team])} cases,"
              f" load {split.loads[team]:g}")
    return OK


def cmd_issue(args) -> int:
    log = IssueLog(args.journal)
    if args.issue_cmd == "open":
        issue = log.open_issue(
            wsi=args.wsi,
            metric=args.metric,
            message=args.message,
            date=_parse_date(args.date),
            box=args.box,
        )
        _info(f"opened issue {issue.id}")
        return OK
    if args.issue_cmd == "assign":
        issue = log.assign(args.id, args.assignee, date=_parse_date(args.date))
        _info(f"issue {issue.id} assigned to {issue.assignee}")
        return OK
    if args.issue_cmd == "resolve":
        issue = log.resolve(args.id, date=_parse_date(args.date),
                            resolution=args.resolution)
        _info(f"issue {issue.id} resolved")
        return OK
    # list
    rows = log.issues(status=args.status, wsi=args.wsi, metric=args.metric)
    for i in rows:
        locator = i.box or "-"
        assignee = i.assignee or "-"
        print(f"{i.id}\t{i.status}\t{i.wsi}\t{i.metric}\t{locator}"
              f"\t{assignee}\t{i.message}")
    _info(f"{len(rows)} issues")
    return OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="annoqc",
        description="Quality control for pathology annotation campaigns.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_protocol(p):
        p.add_argument("--protocol", help="dictionary JSON (default: bundled)")

    def add_docs(p):
        p.add_argument("annotations", nargs="*",
                       help="document files or directories")
        p.add_argument("--annotations", dest="annotations_opt", action="append",
                       help="extra document file or directory")

    def add_thresholds(p):
        p.add_argument("--match-radius-um", type=float,
                       help="override the cell pairing radius")
        p.add_argument("--exhaustiveness-threshold", type=float,
                       help="override the consensus coverage threshold")

    p = sub.add_parser("validate", help="check documents against the dictionary")
    add_protocol(p)
    add_docs(p)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("qc", help="full campaign review")
    add_protocol(p)
    add_docs(p)
    add_thresholds(p)
    p.add_argument("--out", help="directory for reports and CSV exports")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--downsample", type=int, help="raster grid step override")
    p.add_argument("--date", help="run date for filed issues")
    p.add_argument("--journal", help="issue journal to file findings into")
    p.add_argument("--tissue-dir", help="directory of <wsi>.pbm tissue masks")
    p.add_argument("--thumbnails",
                   help="directory of <wsi>.png thumbnails; tissue masks are"
                        " derived when --tissue-dir has none")
    p.add_argument("--force-all", action="store_true",
                   help="compute metrics even for invalid documents")
    p.add_argument("--any-type", action="store_true",
                   help="consensus coverage ignores type identity")
    p.set_defaults(fn=cmd_qc)

    p = sub.add_parser("imageqc", help="screen a slide thumbnail")
    p.add_argument("--image", required=True, help="thumbnail PNG")
    p.add_argument("--downsample", type=float, default=1.0)
    p.add_argument("--mpp", type=float, default=0.25)
    p.add_argument("--tile-px", type=int, default=64)
    p.add_argument("--blur-threshold", type=float, default=None,
                   help="blurry-tile fraction above which the slide fails")
    p.add_argument("--out", help="directory for masks, overlay and result")
    p.set_defaults(fn=cmd_imageqc)

    p = sub.add_parser("agreement", help="per-box agreement for one document")
    add_protocol(p)
    add_thresholds(p)
    p.add_argument("annotations", nargs=1, help="one document file")
    p.add_argument("--box", help="restrict to a single box id")
    p.add_argument("--downsample", type=int)
    p.set_defaults(fn=cmd_agreement)

    p = sub.add_parser("convert", help="import foreign annotation exports")
    add_protocol(p)
    p.add_argument("--format", required=True, choices=["xml-polygons", "point-csv"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mapping", help="JSON file mapping source names to styles")
    p.add_argument("--annotator", help="author for xml-polygons")
    p.add_argument("--created", help="timestamp for xml-polygons")
    p.add_argument("--wsi-id", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--stain", default="HE")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--mpp", type=float, required=True)
    p.add_argument("--label")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("report", help="aggregate counts, areas and timeline")
    add_protocol(p)
    p.add_argument("annotations", nargs="+", help="document files or directories")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("workload", help="deal cases onto teams")
    add_protocol(p)
    p.add_argument("--cases", required=True,
                   help="CSV with a case column and optional effort column")
    p.add_argument("--teams", required=True,
                   help="team count or comma-separated names")
    p.add_argument("--out", help="write the assignment CSV here")
    p.set_defaults(fn=cmd_workload)

    p = sub.add_parser("issue", help="issue journal operations")
    p.add_argument("--journal", required=True)
    issue_sub = p.add_subparsers(dest="issue_cmd", required=True)

    q = issue_sub.add_parser("open")
    q.add_argument("--wsi", required=True)
    q.add_argument("--metric", required=True)
    q.add_argument("--message", required=True)
    q.add_argument("--box")
    q.add_argument("--date", required=True)

    q = issue_sub.add_parser("assign")
    q.add_argument("id", type=int)
    q.add_argument("--assignee", required=True)
    q.add_argument("--date", required=True)

    q = issue_sub.add_parser("resolve")
    q.add_argument("id", type=int)
    q.add_argument("--resolution")
    q.add_argument("--date", required=True)

    q = issue_sub.add_parser("list")
    q.add_argument("--status")
    q.add_argument("--wsi")
    q.add_argument("--metric")

    p.set_defaults(fn=cmd_issue)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ProtocolError, DocumentError, IssueError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
