import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from annoqc.annostore import save_annotations
from annoqc.campaign import (
    _load_tissue,
    discover_documents,
    report_to_doc,
    run_qc,
    workload_split,
)
from annoqc.geometry import BinaryMask
from annoqc.issuelog import IssueLog
from annoqc.protocol import default_protocol

from conftest import T0, mk_box, mk_el, mk_meta, mk_point

PROTO = default_protocol()


def rect_poly(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def region(el_id, x0, y0, x1, y1, annotator, style="HE_Region_DCIS"):
    return mk_el(el_id, style, "polygon", rect_poly(x0, y0, x1, y1), annotator)


def cell_box_with_points(prefix, x0, y0, annotators=("alice",)):
    els = [mk_box(f"{prefix}", "Box_Cell_20x", x0, y0, x0 + 400, y0 + 400)]
    for annotator in annotators:
        els.append(
            mk_point(f"{prefix}-{annotator}-1", "HE_Cell_mitosis",
                     x0 + 100, y0 + 100, annotator)
        )
        els.append(
            mk_point(f"{prefix}-{annotator}-2", "HE_Cell_TILs",
                     x0 + 200, y0 + 200, annotator)
        )
    return els


def build_campaign(root: Path) -> Path:
    docs = root / "docs"
    docs.mkdir()

    # W001: everything in order
    els = [
        mk_box("b1", "Box_Region_5x", 0, 0, 1600, 1600),
        region("r1", 0, 0, 1600, 1600, "alice"),
        mk_box("b2", "Box_Region_5x", 2000, 0, 3600, 1600),
        region("r2", 2000, 0, 3600, 1600, "alice"),
        mk_box("b5", "Box_All_Region_5x", 0, 2000, 1600, 3600),
        region("r5a", 0, 2000, 1600, 3600, "alice"),
        region("r5b", 0, 2000, 1600, 3600, "bob"),
        mk_box("b6", "Box_All_Cell_20x", 4000, 2000, 4400, 2400),
        mk_point("p6a1", "HE_Cell_mitosis", 4100, 2100, "alice"),
        mk_point("p6a2", "HE_Cell_TILs", 4200, 2200, "alice"),
        mk_point("p6b1", "HE_Cell_mitosis", 4102, 2101, "bob"),
        mk_point("p6b2", "HE_Cell_TILs", 4201, 2203, "bob"),
    ]
    els += cell_box_with_points("b3", 4000, 0)
    els += cell_box_with_points("b4", 5000, 0)
    save_annotations(docs / "W001.json", mk_meta("W001", "C001"), els)

    # W002: complete, but two boxes fall short on coverage
    els = [
        mk_box("b1", "Box_Region_5x", 0, 0, 1600, 1600),
        region("r1", 0, 0, 800, 1600, "alice"),  # half the box
        mk_box("b2", "Box_Region_5x", 2000, 0, 3600, 1600),
        region("r2", 2000, 0, 3600, 1600, "alice"),
        mk_box("b5", "Box_All_Region_5x", 0, 2000, 1600, 3600),
        region("r5a", 0, 2000, 1600, 3600, "alice"),
        region("r5b", 0, 2000, 1600, 3600, "bob", style="HE_Region_normal_TDLUs"),
    ]
    els += cell_box_with_points("b3", 4000, 0)
    els += cell_box_with_points("b4", 5000, 0)
    save_annotations(docs / "W002.json", mk_meta("W002", "C002"), els)

    # W003: a required region box is missing
    els = [
        mk_box("b1", "Box_Region_5x", 0, 0, 1600, 1600),
        region("r1", 0, 0, 1600, 1600, "alice"),
    ]
    els += cell_box_with_points("b3", 4000, 0)
    els += cell_box_with_points("b4", 5000, 0)
    save_annotations(docs / "W003.json", mk_meta("W003", "C002"), els)

    # W004: an element nobody can interpret
    els = [
        mk_box("b1", "Box_Region_5x", 0, 0, 1600, 1600),
        mk_el("zz", "Freehand_marker", "polygon", rect_poly(0, 0, 100, 100)),
    ]
    save_annotations(docs / "W004.json", mk_meta("W004", "C003"), els)
    return docs


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("campaign")
    docs = build_campaign(root)
    return run_qc(PROTO, discover_documents(docs)), docs


class TestRunQc:
    def test_reports_sorted_by_wsi(self, campaign):
        result, _ = campaign
        assert [r.wsi for r in result.reports] == ["W001", "W002", "W003", "W004"]

    def test_clean_wsi(self, campaign):
        result, _ = campaign
        w1 = result.reports[0]
        assert w1.clean
        assert not w1.gated
        assert w1.completeness.passed
        assert {m.box_id for m in w1.metrics} == {"b1", "b2", "b5"}
        assert all(m.exhaustiveness == 1.0 for m in w1.metrics)
        b5 = next(m for m in w1.metrics if m.box_id == "b5")
        assert b5.consensus
        assert b5.agreement and b5.agreement[0].jaccard == 1.0

    def test_cell_agreement_pairs(self, campaign):
        result, _ = campaign
        w1 = result.reports[0]
        assert len(w1.cell_agreement) == 1
        entry = w1.cell_agreement[0]
        assert entry.box_id == "b6"
        assert len(entry.pairs) == 1
        pair = entry.pairs[0]
        assert (pair.annotator_a, pair.annotator_b) == ("alice", "bob")
        assert pair.stats.matched == 2
        assert pair.stats.agreed_fraction() == 1.0

    def test_exhaustiveness_findings(self, campaign):
        result, _ = campaign
        w2 = result.reports[1]
        assert not w2.gated and w2.completeness.passed
        by_box = {m.box_id: m for m in w2.metrics}
        assert by_box["b1"].exhaustiveness == 0.5
        assert by_box["b5"].exhaustiveness == 0.0  # no type shared by both
        boxes = {f["box"] for f in w2.findings}
        assert boxes == {"b1", "b5"}
        assert all(f["metric"] == "exhaustiveness" for f in w2.findings)

    def test_completeness_finding_gates_later_stages(self, campaign):
        result, _ = campaign
        w3 = result.reports[2]
        assert not w3.completeness.passed
        missing = w3.completeness.missing
        assert len(missing) == 1
        assert missing[0].construct == "Box_Region_5x"
        assert (missing[0].found, missing[0].required) == (1, 2)
        # one finding for the whole document, and no metrics past the gate
        assert len(w3.findings) == 1
        assert w3.findings[0]["metric"] == "completeness"
        assert w3.findings[0]["box"] is None
        assert "Box_Region_5x 1/2" in w3.findings[0]["message"]
        assert w3.metrics == [] and w3.cell_agreement == []

    def test_gated_wsi(self, campaign):
        result, _ = campaign
        w4 = result.reports[3]
        assert w4.gated
        assert w4.violations and w4.violations[0].kind == "unknown-style"
        assert w4.completeness is None
        assert w4.metrics == []
        assert w4.findings[0]["metric"] == "validation"

    def test_summary_excludes_gated(self, campaign):
        result, _ = campaign
        assert result.summary.n_wsis == 3
        assert result.summary.cases == {"C001", "C002"}
        # DCIS polygons: 4 (W001) + 3 (W002) + 1 (W003)
        assert result.summary.region_counts["DCIS"] == 8
        # metric rows only for documents that cleared the completeness gate
        assert len(result.summary.box_rows) == 6

    def test_findings_roll_up(self, campaign):
        result, _ = campaign
        assert len(result.findings) == 4

    def test_force_all_includes_gated(self, campaign):
        _, docs = campaign
        result = run_qc(PROTO, discover_documents(docs), force_all=True)
        w4 = result.reports[3]
        assert not w4.gated
        assert w4.completeness is not None
        assert result.summary.n_wsis == 4
        # the validation finding survives even when not gating
        assert any(f["metric"] == "validation" for f in w4.findings)

    def test_duplicate_wsi_id_is_a_hard_error(self, campaign, tmp_path):
        _, docs = campaign
        extra = tmp_path / "W001_copy.json"
        extra.write_bytes((docs / "W001.json").read_bytes())
        with pytest.raises(ValueError, match="duplicate wsi id"):
            run_qc(PROTO, [docs / "W001.json", extra])

    def test_journal_requires_date(self, campaign, tmp_path):
        _, docs = campaign
        with pytest.raises(ValueError, match="explicit date"):
            run_qc(PROTO, discover_documents(docs), journal=tmp_path / "j.jsonl")


class TestIssueFiling:
    def test_new_rerun_resolve_refiled(self, tmp_path):
        docs = build_campaign(tmp_path)
        journal = tmp_path / "issues.jsonl"
        result = run_qc(
            PROTO, discover_documents(docs), journal=journal, date=T0
        )
        assert len(result.new_issues) == 4
        keys = [(i.wsi, i.metric) for i in result.new_issues]
        assert keys == sorted(keys)

        again = run_qc(PROTO, discover_documents(docs), journal=journal, date=T0)
        assert again.new_issues == []

        log = IssueLog(journal)
        target = next(i for i in log.issues() if i.metric == "completeness")
        log.resolve(target.id, date=T0)
        third = run_qc(PROTO, discover_documents(docs), journal=journal, date=T0)
        assert len(third.new_issues) == 1
        assert third.new_issues[0].metric == "completeness"
        assert third.new_issues[0].id == len(log.issues()) + 1


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestOutputs:
    def test_output_tree(self, campaign, tmp_path):
        _, docs = campaign
        out = tmp_path / "out"
        run_qc(PROTO, discover_documents(docs), out_dir=out)
        names = set(_tree_bytes(out))
        assert {
            "summary.json",
            "reports/W001.json",
            "reports/W002.json",
            "reports/W003.json",
            "reports/W004.json",
            "csv/regions.csv",
            "csv/cells.csv",
            "csv/constructs.csv",
            "csv/timeline.csv",
            "csv/boxes.csv",
        } <= names
        assert not any(name.endswith(".tmp") for name in names)
        w2 = json.loads((out / "reports" / "W002.json").read_text())
        row = next(b for b in w2["boxes"] if b["box"] == "b1")
        assert row["exhaustiveness"] == 0.5
        assert json.loads((out / "summary.json").read_text())["n_wsis"] == 3

    def test_jobs_do_not_change_a_byte(self, campaign, tmp_path):
        _, docs = campaign
        serial, parallel = tmp_path / "serial", tmp_path / "parallel"
        run_qc(PROTO, discover_documents(docs), out_dir=serial, jobs=1)
        run_qc(PROTO, discover_documents(docs), out_dir=parallel, jobs=3)
        assert _tree_bytes(serial) == _tree_bytes(parallel)

    def test_report_doc_round_trips_through_json(self, campaign):
        result, _ = campaign
        for report in result.reports:
            doc = report_to_doc(report)
            assert json.loads(json.dumps(doc)) == doc


class TestTissueMasks:
    def test_downsample_inferred_from_width(self, tmp_path):
        mask = BinaryMask(
            1563, 1250, 1.0, (0.0, 0.0), np.zeros((1250, 1563), dtype=bool)
        )
        path = tmp_path / "W002.pbm"
        path.write_bytes(mask.to_pbm())
        loaded = _load_tissue(str(path), width_px=100_000)
        assert loaded.downsample == 64
        assert loaded.width == 1563

    def test_empty_tissue_makes_coverage_moot(self, tmp_path):
        docs = build_campaign(tmp_path)
        masks = tmp_path / "masks"
        masks.mkdir()
        mask = BinaryMask(
            1563, 1250, 1.0, (0.0, 0.0), np.zeros((1250, 1563), dtype=bool)
        )
        (masks / "W002.pbm").write_bytes(mask.to_pbm())
        result = run_qc(PROTO, [docs / "W002.json"], tissue_dir=masks)
        w2 = result.reports[0]
        assert all(m.exhaustiveness == 1.0 for m in w2.metrics)
        assert w2.findings == []


def _lpt_opt(efforts: list[float], n_teams: int) -> float:
    best = float("inf")
    for assign in itertools.product(range(n_teams), repeat=len(efforts)):
        loads = [0.0] * n_teams
        for effort, team in zip(efforts, assign):
            loads[team] += effort
        best = min(best, max(loads))
    return best


class TestWorkloadSplit:
    def test_lpt_within_four_thirds_of_optimum(self):
        rng = np.random.RandomState(17)
        for trial in range(25):
            n = int(rng.randint(1, 11))
            teams = int(rng.randint(2, 4))
            efforts = {f"C{i:02d}": float(rng.randint(1, 21)) for i in range(n)}
            split = workload_split(efforts, teams)
            makespan = max(split.loads.values())
            opt = _lpt_opt(list(efforts.values()), teams)
            assert makespan <= 4.0 / 3.0 * opt + 1e-9, f"trial {trial}"

    def test_deterministic_and_name_tie_broken(self):
        efforts = {"d": 5.0, "b": 5.0, "c": 5.0, "a": 5.0}
        split = workload_split(efforts, ["t1", "t2"])
        assert split.cases == {"t1": ["a", "c"], "t2": ["b", "d"]}
        again = workload_split(dict(reversed(list(efforts.items()))), ["t1", "t2"])
        assert again.cases == split.cases

    def test_int_team_count_makes_names(self):
        split = workload_split({"a": 1.0}, 3)
        assert split.teams == ["team1", "team2", "team3"]
        assert split.cases["team1"] == ["a"]

    def test_loads_add_up(self):
        efforts = {"a": 3.0, "b": 2.0, "c": 7.0, "d": 1.0}
        split = workload_split(efforts, 2)
        assert sum(split.loads.values()) == 13.0
        assert sorted(sum(efforts[c] for c in split.cases[t])
                      for t in split.teams) == sorted(split.loads.values())

    def test_rows_for_export(self):
        split = workload_split({"a": 2.0, "b": 1.0}, ["x", "y"])
        assert split.to_rows() == [["team", "case"], ["x", "a"], ["y", "b"]]

    def test_errors(self):
        with pytest.raises(ValueError, match="at least one team"):
            workload_split({"a": 1.0}, 0)
        with pytest.raises(ValueError, match="unique"):
            workload_split({"a": 1.0}, ["t", "t"])
        with pytest.raises(ValueError, match="negative effort"):
            workload_split({"a": -1.0}, 2)
