#!/usr/bin/env python3
"""Run the whole pipeline over a small on-disk campaign.

Creates four annotation documents (two healthy, one missing required
boxes, one with a coverage hole), reviews them with an issue journal
attached, shows that reruns are byte-stable and do not refile open
issues, and finally splits the follow-up work across two teams.
"""
import tempfile
from datetime import datetime, timedelta, timezone
from pathlib import Path

from annoqc.annostore import AnnotationElement, WsiMetadata, save_annotations
from annoqc.campaign import run_qc, workload_split
from annoqc.issuelog import IssueLog
from annoqc.protocol import default_protocol

proto = default_protocol()
t0 = datetime(2023, 9, 1, 8, 0, tzinfo=timezone.utc)
MPP = 0.25


def el(eid, who, style, shape, coords, minutes=0):
    return AnnotationElement(
        id=eid, annotator=who, created=t0 + timedelta(minutes=minutes),
        style=style, shape=shape,
        coords=tuple((float(x), float(y)) for x, y in coords),
    )


def rect(eid, who, style, x, y, w, h, minutes=0):
    return el(eid, who, style, "rectangle", [(x, y), (x + w, y + h)], minutes)


def full_cover(eid, who, x, y, w, h, minutes=0):
    offs = 8
    return el(eid, who, "HE_Region_tumor_non_tubular", "polygon",
              [(x - offs, y - offs), (x + w + offs, y - offs),
               (x + w + offs, y + h + offs), (x - offs, y + h + offs)], minutes)


def build_doc(wsi, case, incomplete=False, hole=False):
    """Two region boxes + two cell boxes, fully annotated unless told not to."""
    meta = WsiMetadata(id=wsi, case_id=case, stain="H&E",
                       width_px=30_000, height_px=20_000, mpp=MPP)
    elements = []
    n = 0
    for bx in (1000, 7000):
        n += 1
        if incomplete and bx > 1000:
            continue  # drop the second region box: completeness will fail
        elements.append(rect(f"rb{n}", "alice", "Box_Region_5x", bx, 1000, 4000, 4000))
        if hole and bx > 1000:
            # cover only the left half of this box
            elements.append(el(f"rp{n}", "alice", "HE_Region_tumor_non_tubular",
                               "polygon", [(bx, 1000), (bx + 2000, 1000),
                                           (bx + 2000, 5000), (bx, 5000)]))
        else:
            elements.append(full_cover(f"rp{n}", "alice", bx, 1000, 4000, 4000))
    for k, bx in enumerate((1000, 7000), start=1):
        elements.append(rect(f"cb{k}", "alice", "Box_Cell_20x", bx, 8000, 2000, 2000))
        for j in range(5):
            elements.append(el(f"cp{k}{j}", "alice", "HE_Cell_tumor_NP2", "point",
                               [(bx + 200 + 300 * j, 8500)]))
    # one consensus cell box read by two annotators, bob shifted by 2 px
    elements.append(rect("xb1", "alice", "Box_All_Cell_20x", 14000, 8000, 2000, 2000))
    for j in range(6):
        elements.append(el(f"xa{j}", "alice", "HE_Cell_TILs", "point",
                           [(14200 + 250 * j, 8800)]))
        elements.append(el(f"xp{j}", "bob", "HE_Cell_TILs", "point",
                           [(14202 + 250 * j, 8801)], minutes=30))
    return meta, elements


DOCS = [
    ("wsi-01", "case-a", {}),
    ("wsi-02", "case-b", {}),
    ("wsi-03", "case-c", {"incomplete": True}),
    ("wsi-04", "case-d", {"hole": True}),
]

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    ann = root / "annotations"
    ann.mkdir()
    for wsi, case, kw in DOCS:
        meta, elements = build_doc(wsi, case, **kw)
        save_annotations(ann / f"{wsi}.json", meta, elements)
    print(f"campaign on disk: {len(list(ann.iterdir()))} documents")

    out = root / "qc"
    journal = root / "issues.jsonl"
    review_day = datetime(2023, 9, 4, tzinfo=timezone.utc)
    result = run_qc(proto, sorted(ann.iterdir()), out_dir=out,
                    journal=journal, date=review_day)

    print("\nper-document outcome:")
    for r in result.reports:
        state = "gated" if r.gated else ("clean" if r.clean else "findings")
        print(f"  {r.wsi} ({r.case}): {state}, {len(r.metrics)} region boxes scored, "
              f"{len(r.cell_agreement)} cell boxes compared")
    for f in result.findings:
        print(f"  finding: {f['wsi']} {f['metric']}: {f['message']}")

    print(f"\nissues opened on first review: "
          f"{[(i.id, i.wsi, i.metric) for i in result.new_issues]}")

    summary_bytes = (out / "summary.json").read_bytes()
    again = run_qc(proto, sorted(ann.iterdir()), out_dir=out,
                   journal=journal, date=review_day + timedelta(days=1))
    print(f"rerun next day: {len(again.new_issues)} new issues "
          f"(open ones are not refiled)")
    print(f"summary.json byte-identical across reruns: "
          f"{(out / 'summary.json').read_bytes() == summary_bytes}")

    log = IssueLog(journal)
    first = min(result.new_issues, key=lambda i: i.id)
    log.assign(first.id, "carol", review_day + timedelta(days=1))
    log.resolve(first.id, review_day + timedelta(days=2),
                resolution="annotator notified, rework scheduled")
    open_now = [i for i in log.state().values() if i.status != "resolved"]
    print(f"after triage: {len(open_now)} open, 1 resolved")

    # Resolving without fixing the data means the next review reopens it.
    third = run_qc(proto, sorted(ann.iterdir()), journal=journal,
                   date=review_day + timedelta(days=3))
    print(f"review after resolving but not fixing: "
          f"{len(third.new_issues)} issue refiled")

    print("\nproject totals: "
          f"{result.summary.total_boxes()} boxes across {result.summary.n_wsis} documents")

    # Split the remaining cases over two teams, heaviest first.
    efforts = {"case-a": 3.0, "case-b": 2.0, "case-c": 6.0, "case-d": 5.0,
               "case-e": 2.5, "case-f": 1.0}
    deal = workload_split(efforts, 2)
    print("\nworkload split across 2 teams:")
    for team in deal.teams:
        print(f"  {team}: {', '.join(deal.cases[team])} (load {deal.loads[team]})")
    print(f"spread: max {deal.max_load} / min {deal.min_load}")
