"""Append-only issue journal for review findings.

Every state change is one JSON object on its own line of a journal file, so
the full history stays auditable and the current state is always
reproducible by replaying the file from the top.  Appends take an advisory
lock and re-read anything another writer added first, which keeps issue ids
unique across processes sharing one journal.
"""

from __future__ import annotations

import fcntl
import json
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

from .annostore import format_timestamp

EVENTS = ("opened", "assigned", "resolved")
STATUSES = ("open", "assigned", "resolved")


class IssueError(ValueError):
    pass


@dataclass(frozen=True)
class Issue:
    id: int
    wsi: str
    metric: str
    message: str
    box: str | None
    opened: str
    status: str = "open"
    assignee: str | None = None
    resolved: str | None = None
    resolution: str | None = None

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "wsi": self.wsi,
            "metric": self.metric,
            "message": self.message,
            "box": self.box,
            "opened": self.opened,
            "status": self.status,
            "assignee": self.assignee,
            "resolved": self.resolved,
            "resolution": self.resolution,
        }


def _apply(state: dict[int, Issue], record: dict) -> None:
    """One journal record onto the issue table, with the same guards the
    live methods enforce."""
    event = record.get("event")
    if event not in EVENTS:
        raise IssueError(f"unknown event {event!r}")
    try:
        issue_id = int(record["issue"])
        date = record["date"]
    except (KeyError, TypeError) as exc:
        raise IssueError(f"malformed {event} record: {exc}") from exc
    if event == "opened":
        if issue_id in state:
            raise IssueError(f"issue {issue_id} opened twice")
        try:
            state[issue_id] = Issue(
                id=issue_id,
                wsi=record["wsi"],
                metric=record["metric"],
                message=record["message"],
                box=record.get("box"),
                opened=date,
            )
        except KeyError as exc:
            raise IssueError(f"opened record missing {exc}") from exc
        return
    if issue_id not in state:
        raise IssueError(f"{event} event for unknown issue {issue_id}")
    issue = state[issue_id]
    if issue.status == "resolved":
        raise IssueError(f"issue {issue_id} is already resolved")
    if event == "assigned":
        assignee = record.get("assignee")
        if not assignee:
            raise IssueError("assigned record without assignee")
        state[issue_id] = replace(issue, status="assigned", assignee=assignee)
    else:  # resolved
        state[issue_id] = replace(
            issue,
            status="resolved",
            resolved=date,
            resolution=record.get("resolution"),
        )


def replay(path) -> dict[int, Issue]:
    """Rebuild the issue table from scratch; the result always matches the
    state an in-process writer accumulated incrementally."""
    state: dict[int, Issue] = {}
    raw = Path(path).read_bytes()
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IssueError(f"line {lineno}: not valid JSON: {exc}") from exc
        try:
            _apply(state, record)
        except IssueError as exc:
            raise IssueError(f"line {lineno}: {exc}") from exc
    return state


class IssueLog:
    """Live handle on a journal file."""

    def __init__(self, path, create: bool = True):
        self.path = Path(path)
        self._state: dict[int, Issue] = {}
        self._offset = 0
        if not self.path.exists():
            if not create:
                raise IssueError(f"no journal at {self.path}")
            self.path.touch()
        self._catch_up_from(self.path.read_bytes())

    def _catch_up_from(self, tail: bytes) -> None:
        for line in tail.decode("utf-8").splitlines():
            if line.strip():
                _apply(self._state, json.loads(line))
        self._offset += len(tail)

    def _append(self, record: dict) -> None:
        # lock, absorb what other writers appended, then write our line
        with open(self.path, "rb+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(self._offset)
                self._catch_up_from(fh.read())
                _apply(self._state, record)
                line = json.dumps(record, ensure_ascii=False) + "\n"
                data = line.encode("utf-8")
                fh.write(data)
                fh.flush()
                self._offset += len(data)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def refresh(self) -> None:
        """Absorb records other writers appended since the last look."""
        with open(self.path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                fh.seek(self._offset)
                self._catch_up_from(fh.read())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _next_id(self) -> int:
        return max(self._state, default=0) + 1

    def open_issue(
        self,
        wsi: str,
        metric: str,
        message: str,
        date: datetime,
        box: str | None = None,
    ) -> Issue:
        record = {
            "event": "opened",
            "issue": None,  # fixed under the lock, see _append
            "date": format_timestamp(date),
            "wsi": wsi,
            "metric": metric,
            "box": box,
            "message": message,
        }
        # the id must be allocated after catching up, inside the lock
        with open(self.path, "rb+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(self._offset)
                self._catch_up_from(fh.read())
                record["issue"] = self._next_id()
                _apply(self._state, record)
                data = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
                fh.write(data)
                fh.flush()
                self._offset += len(data)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        return self._state[record["issue"]]

    def assign(self, issue_id: int, assignee: str, date: datetime) -> Issue:
        self._append(
            {
                "event": "assigned",
                "issue": issue_id,
                "date": format_timestamp(date),
                "assignee": assignee,
            }
        )
        return self._state[issue_id]

    def resolve(
        self, issue_id: int, date: datetime, resolution: str | None = None
    ) -> Issue:
        self._append(
            {
                "event": "resolved",
                "issue": issue_id,
                "date": format_timestamp(date),
                "resolution": resolution,
            }
        )
        return self._state[issue_id]

    def get(self, issue_id: int) -> Issue:
        try:
            return self._state[issue_id]
        except KeyError:
            raise IssueError(f"no issue {issue_id}") from None

    def issues(
        self,
        status: str | None = None,
        wsi: str | None = None,
        metric: str | None = None,
    ) -> list[Issue]:
        if status is not None and status not in STATUSES:
            raise IssueError(f"unknown status {status!r}")
        out = []
        for issue_id in sorted(self._state):
            issue = self._state[issue_id]
            if status is not None and issue.status != status:
                continue
            if wsi is not None and issue.wsi != wsi:
                continue
            if metric is not None and issue.metric != metric:
                continue
            out.append(issue)
        return out

    def state(self) -> dict[int, Issue]:
        return dict(self._state)


def auto_file_issues(
    log: IssueLog, findings: list[dict], date: datetime
) -> list[Issue]:
    """Open issues for findings that are not already tracked.

    A finding is a dict with wsi, metric, message and optional box.  One
    unresolved issue per (wsi, metric, box) key is enough: duplicates are
    skipped, both against the journal and within the batch.
    """
    log.refresh()
    live = {
        (i.wsi, i.metric, i.box)
        for i in log.state().values()
        if i.status != "resolved"
    }
    opened: list[Issue] = []
    for finding in findings:
        key = (finding["wsi"], finding["metric"], finding.get("box"))
        if key in live:
            continue
        live.add(key)
        opened.append(
            log.open_issue(
                wsi=finding["wsi"],
                metric=finding["metric"],
                message=finding["message"],
                date=date,
                box=finding.get("box"),
            )
        )
    return opened
