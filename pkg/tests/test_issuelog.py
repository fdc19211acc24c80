import json
from dataclasses import replace
from datetime import timedelta

import numpy as np
import pytest

from annoqc.issuelog import Issue, IssueError, IssueLog, auto_file_issues, replay

from conftest import T0


@pytest.fixture
def log(tmp_path):
    return IssueLog(tmp_path / "issues.jsonl")


def test_lifecycle(log):
    issue = log.open_issue("W001", "exhaustiveness", "box b1 under threshold",
                           date=T0, box="b1")
    assert issue.id == 1
    assert issue.status == "open"
    assert issue.opened == "2021-06-08T12:00:00+00:00"
    assert issue.box == "b1"

    issue = log.assign(1, "alice", date=T0 + timedelta(days=1))
    assert issue.status == "assigned"
    assert issue.assignee == "alice"

    issue = log.resolve(1, date=T0 + timedelta(days=2), resolution="redrawn")
    assert issue.status == "resolved"
    assert issue.resolved == "2021-06-10T12:00:00+00:00"
    assert issue.resolution == "redrawn"


def test_journal_is_one_json_object_per_line(log):
    log.open_issue("W001", "completeness", "m", date=T0)
    log.assign(1, "bob", date=T0)
    log.resolve(1, date=T0)
    lines = log.path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(l)["event"] for l in lines] == [
        "opened", "assigned", "resolved",
    ]
    assert all(json.loads(l)["issue"] == 1 for l in lines)


def test_ids_increment_and_never_get_reused(log):
    for i in range(3):
        assert log.open_issue("W", "m", "x", date=T0).id == i + 1
    log.resolve(2, date=T0)
    assert log.open_issue("W", "m", "y", date=T0).id == 4


def test_reassignment_allowed(log):
    log.open_issue("W", "m", "x", date=T0)
    log.assign(1, "alice", date=T0)
    issue = log.assign(1, "bob", date=T0)
    assert issue.assignee == "bob"
    assert issue.status == "assigned"


def test_guards(log):
    log.open_issue("W", "m", "x", date=T0)
    log.resolve(1, date=T0)
    with pytest.raises(IssueError, match="already resolved"):
        log.resolve(1, date=T0)
    with pytest.raises(IssueError, match="already resolved"):
        log.assign(1, "alice", date=T0)
    with pytest.raises(IssueError, match="unknown issue"):
        log.assign(99, "alice", date=T0)
    with pytest.raises(IssueError, match="unknown issue"):
        log.resolve(99, date=T0)
    with pytest.raises(IssueError, match="no issue"):
        log.get(99)
    with pytest.raises(IssueError, match="unknown status"):
        log.issues(status="parked")


def test_filters(log):
    log.open_issue("W001", "exhaustiveness", "a", date=T0, box="b1")
    log.open_issue("W001", "completeness", "b", date=T0)
    log.open_issue("W002", "exhaustiveness", "c", date=T0, box="b9")
    log.assign(3, "carol", date=T0)
    log.resolve(2, date=T0)

    assert [i.id for i in log.issues()] == [1, 2, 3]
    assert [i.id for i in log.issues(status="open")] == [1]
    assert [i.id for i in log.issues(status="assigned")] == [3]
    assert [i.id for i in log.issues(status="resolved")] == [2]
    assert [i.id for i in log.issues(wsi="W001")] == [1, 2]
    assert [i.id for i in log.issues(metric="exhaustiveness")] == [1, 3]
    assert [i.id for i in log.issues(wsi="W002", metric="exhaustiveness")] == [3]


def test_replay_matches_incremental(log):
    log.open_issue("W001", "m1", "a", date=T0, box="b1")
    log.open_issue("W002", "m2", "b", date=T0)
    log.assign(1, "alice", date=T0)
    log.resolve(1, date=T0, resolution="done")
    assert replay(log.path) == log.state()
    assert IssueLog(log.path).state() == log.state()


class TestReplayStrictness:
    def test_malformed_json_line(self, tmp_path):
        path = tmp_path / "j.jsonl"
        path.write_text('{"event": "opened", "issue": 1\n', encoding="utf-8")
        with pytest.raises(IssueError, match="line 1"):
            replay(path)

    def test_unknown_event(self, tmp_path):
        path = tmp_path / "j.jsonl"
        path.write_text('{"event": "snoozed", "issue": 1, "date": "x"}\n')
        with pytest.raises(IssueError, match="unknown event"):
            replay(path)

    def test_event_before_open(self, tmp_path):
        path = tmp_path / "j.jsonl"
        path.write_text(
            '{"event": "assigned", "issue": 1, "date": "x", "assignee": "a"}\n'
        )
        with pytest.raises(IssueError, match="unknown issue"):
            replay(path)

    def test_double_open(self, tmp_path):
        path = tmp_path / "j.jsonl"
        rec = {"event": "opened", "issue": 1, "date": "x", "wsi": "W",
               "metric": "m", "message": "z"}
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(IssueError, match="opened twice"):
            replay(path)

    def test_missing_journal(self, tmp_path):
        with pytest.raises(IssueError, match="no journal"):
            IssueLog(tmp_path / "absent.jsonl", create=False)


def test_two_writers_share_one_journal(tmp_path):
    path = tmp_path / "issues.jsonl"
    a = IssueLog(path)
    a.open_issue("W001", "m", "from a", date=T0)

    b = IssueLog(path)
    assert 1 in b.state()
    assert b.open_issue("W002", "m", "from b", date=T0).id == 2

    # a catches up under the lock: knows issue 2, allocates 3
    a.assign(2, "alice", date=T0)
    assert a.open_issue("W003", "m", "from a again", date=T0).id == 3
    b.refresh()
    assert b.state() == a.state() == replay(path)


def test_random_sequences_replay_equals_incremental(tmp_path):
    rng = np.random.RandomState(42)
    for trial in range(60):
        path = tmp_path / f"trial{trial}.jsonl"
        log = IssueLog(path)
        expected: dict[int, Issue] = {}
        live = []
        for step in range(int(rng.randint(1, 26))):
            date = T0 + timedelta(hours=step)
            ops = ["open"] + (["assign", "resolve"] if live else [])
            op = ops[rng.randint(len(ops))]
            if op == "open":
                wsi = f"W{rng.randint(3)}"
                metric = ["completeness", "exhaustiveness"][rng.randint(2)]
                issue = log.open_issue(wsi, metric, "msg", date=date)
                expected[issue.id] = Issue(
                    id=issue.id, wsi=wsi, metric=metric, message="msg",
                    box=None, opened=issue.opened,
                )
                live.append(issue.id)
            elif op == "assign":
                target = live[rng.randint(len(live))]
                who = f"user{rng.randint(4)}"
                log.assign(target, who, date=date)
                expected[target] = replace(
                    expected[target], status="assigned", assignee=who
                )
            else:
                target = live.pop(rng.randint(len(live)))
                issue = log.resolve(target, date=date)
                expected[target] = replace(
                    expected[target], status="resolved", resolved=issue.resolved
                )
        assert log.state() == expected, f"trial {trial}"
        assert replay(path) == expected, f"trial {trial}"


class TestAutoFile:
    def finding(self, wsi="W001", metric="exhaustiveness", box="b1"):
        return {"wsi": wsi, "metric": metric, "box": box, "message": "low"}

    def test_files_new_findings(self, log):
        opened = auto_file_issues(log, [self.finding(), self.finding(box="b2")], T0)
        assert [i.id for i in opened] == [1, 2]
        assert {i.box for i in opened} == {"b1", "b2"}

    def test_open_duplicates_skipped(self, log):
        auto_file_issues(log, [self.finding()], T0)
        again = auto_file_issues(log, [self.finding()], T0 + timedelta(days=1))
        assert again == []
        assert len(log.issues()) == 1

    def test_assigned_still_counts_as_tracked(self, log):
        auto_file_issues(log, [self.finding()], T0)
        log.assign(1, "alice", T0)
        assert auto_file_issues(log, [self.finding()], T0) == []

    def test_resolved_issue_refiled(self, log):
        auto_file_issues(log, [self.finding()], T0)
        log.resolve(1, date=T0)
        again = auto_file_issues(log, [self.finding()], T0 + timedelta(days=2))
        assert [i.id for i in again] == [2]

    def test_batch_internal_dedup(self, log):
        opened = auto_file_issues(log, [self.finding(), self.finding()], T0)
        assert len(opened) == 1

    def test_key_includes_metric_and_box(self, log):
        batch = [
            self.finding(),
            self.finding(metric="completeness"),
            self.finding(box=None),
        ]
        assert len(auto_file_issues(log, batch, T0)) == 3
