"""Shared fixture builders for the test suite."""

from __future__ import annotations

from datetime import datetime, timezone

import pytest

from annoqc.annostore import AnnotationElement, WsiMetadata
from annoqc.protocol import default_protocol

T0 = datetime(2021, 6, 8, 12, 0, 0, tzinfo=timezone.utc)


def mk_meta(
    wsi_id="W001",
    case_id="C001",
    stain="HE",
    width=100_000,
    height=80_000,
    mpp=0.25,
    label=None,
):
    return WsiMetadata(wsi_id, case_id, stain, width, height, mpp, label)


def mk_el(
    el_id,
    style,
    shape,
    coords,
    annotator="alice",
    created=T0,
    text=None,
):
    return AnnotationElement(
        id=el_id,
        annotator=annotator,
        created=created,
        style=style,
        shape=shape,
        coords=tuple((float(x), float(y)) for x, y in coords),
        text=text,
    )


def mk_box(el_id, construct, x0, y0, x1, y1, annotator="coordinator", created=T0):
    return mk_el(
        el_id, construct, "rectangle", [(x0, y0), (x1, y1)], annotator, created
    )


def mk_point(el_id, style, x, y, annotator="alice", created=T0):
    return mk_el(el_id, style, "point", [(x, y)], annotator, created)


def square(cx, cy, half):
    return [
        (cx - half, cy - half),
        (cx + half, cy - half),
        (cx + half, cy + half),
        (cx - half, cy + half),
    ]


@pytest.fixture(scope="session")
def proto():
    return default_protocol()
