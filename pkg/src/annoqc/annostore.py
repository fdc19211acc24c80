"""Annotation documents: canonical JSON, foreign-format import, box grouping.

One document describes one whole-slide image and its annotation elements.
Exports are canonical (fixed key order, shortest round-trip decimals,
timestamps as ISO-8601 UTC), so export(parse(export(doc))) is byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .protocol import Protocol, BoxConstructDef

SHAPES = ("polygon", "rectangle", "line", "point", "text")


class DocumentError(ValueError):
    """Base for annotation document problems."""


class ParseError(DocumentError):
    """Malformed text or uninterpretable values, with field context."""


class SchemaError(DocumentError):
    """A mandatory field is missing or structurally wrong."""


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware UTC datetime; accepts a trailing 'Z'."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as e:
        raise ParseError(f"bad timestamp {text!r}: {e}") from e
    if dt.tzinfo is None:
        raise ParseError(f"timestamp {text!r} must carry a UTC offset")
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    """Canonical ISO-8601 UTC text with an explicit +00:00 offset."""
    if dt.tzinfo is None:
        raise ValueError("timestamp must be timezone-aware")
    return dt.astimezone(timezone.utc).isoformat()


@dataclass
class WsiMetadata:
    id: str
    case_id: str
    stain: str
    width_px: int
    height_px: int
    mpp: float
    label: str | None = None


@dataclass(slots=True)
class AnnotationElement:
    id: str
    annotator: str
    created: datetime
    style: str
    shape: str
    coords: tuple[tuple[float, float], ...]
    text: str | None = None

    def rep_point(self) -> tuple[float, float]:
        """Representative point used for box membership tests."""
        if self.shape in ("point", "text"):
            return self.coords[0]
        if self.shape == "rectangle":
            (x0, y0), (x1, y1) = self.coords[0], self.coords[-1]
            return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        xs = [c[0] for c in self.coords]
        ys = [c[1] for c in self.coords]
        return (sum(xs) / len(xs), sum(ys) / len(ys))


def _coords_from_json(raw, where: str) -> tuple[tuple[float, float], ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError(f"{where}: coords must be a non-empty list of [x, y]")
    out = []
    for k, pair in enumerate(raw):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ParseError(f"{where}: coords[{k}] must be an [x, y] pair")
        try:
            out.append((float(pair[0]), float(pair[1])))
        except (TypeError, ValueError) as e:
            raise ParseError(f"{where}: coords[{k}] not numeric: {e}") from e
    return tuple(out)


def _normalize_rectangle(
    coords: tuple[tuple[float, float], ...], where: str
) -> tuple[tuple[float, float], ...]:
    """Rectangles canonicalize to two corners, (min, min) then (max, max)."""
    if len(coords) not in (2, 4):
        raise ParseError(f"{where}: rectangle needs 2 or 4 corners")
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    return ((min(xs), min(ys)), (max(xs), max(ys)))


def parse_annotations(text: str) -> tuple[WsiMetadata, list[AnnotationElement]]:
    """Parse a canonical annotation document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object")
    for key in ("wsi", "elements"):
        if key not in doc:
            raise SchemaError(f"missing mandatory key {key!r}")

    w = doc["wsi"]
    for key in ("id", "case_id", "stain", "width_px", "height_px", "mpp"):
        if key not in w:
            raise SchemaError(f"wsi: missing mandatory field {key!r}")
    try:
        meta = WsiMetadata(
            id=str(w["id"]),
            case_id=str(w["case_id"]),
            stain=str(w["stain"]),
            width_px=int(w["width_px"]),
            height_px=int(w["height_px"]),
            mpp=float(w["mpp"]),
            label=None if w.get("label") is None else str(w["label"]),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"wsi: {e}") from e
    if meta.width_px <= 0 or meta.height_px <= 0 or meta.mpp <= 0:
        raise ParseError("wsi: dimensions and mpp must be positive")

    elements: list[AnnotationElement] = []
    seen_ids: set[str] = set()
    for i, rec in enumerate(doc["elements"]):
        where = f"elements[{i}]"
        for key in ("id", "annotator", "created", "style", "shape", "coords"):
            if key not in rec:
                raise SchemaError(f"{where}: missing mandatory field {key!r}")
        shape = str(rec["shape"])
        if shape not in SHAPES:
            raise ParseError(f"{where}: uninterpretable shape {shape!r}")
        coords = _coords_from_json(rec["coords"], where)
        if shape == "rectangle":
            coords = _normalize_rectangle(coords, where)
        el = AnnotationElement(
            id=str(rec["id"]),
            annotator=str(rec["annotator"]),
            created=parse_timestamp(str(rec["created"])),
            style=str(rec["style"]),
            shape=shape,
            coords=coords,
            text=None if rec.get("text") is None else str(rec["text"]),
        )
        if el.id in seen_ids:
            raise SchemaError(f"{where}: duplicate element id {el.id!r}")
        seen_ids.add(el.id)
        elements.append(el)
    return meta, elements


def load_annotations(path) -> tuple[WsiMetadata, list[AnnotationElement]]:
    return parse_annotations(Path(path).read_text(encoding="utf-8"))


def export_annotations(meta: WsiMetadata, elements: list[AnnotationElement]) -> str:
    """Canonical document text for (meta, elements)."""
    wsi: dict = {
        "id": meta.id,
        "case_id": meta.case_id,
        "stain": meta.stain,
        "width_px": meta.width_px,
        "height_px": meta.height_px,
        "mpp": meta.mpp,
    }
    if meta.label is not None:
        wsi["label"] = meta.label
    recs = []
    for el in elements:
        rec: dict = {
            "id": el.id,
            "annotator": el.annotator,
            "created": format_timestamp(el.created),
            "style": el.style,
            "shape": el.shape,
            "coords": [[x, y] for x, y in el.coords],
        }
        if el.text is not None:
            rec["text"] = el.text
        recs.append(rec)
    return json.dumps({"wsi": wsi, "elements": recs}, indent=2, ensure_ascii=False) + "\n"


def save_annotations(path, meta: WsiMetadata, elements: list[AnnotationElement]) -> None:
    Path(path).write_text(export_annotations(meta, elements), encoding="utf-8")


# ---------------------------------------------------------------------------
# foreign formats


def import_xml_polygons(
    text: str,
    annotator: str,
    created: datetime,
    style_map: dict[str, str] | None = None,
    default_style: str = "Style_unknown_region",
) -> list[AnnotationElement]:
    """Import polygon annotations from viewer XML exports.

    Expects ``Annotation`` nodes carrying a ``Type`` attribute with child
    ``Coordinate`` nodes (attributes ``X``, ``Y``, ``Order``).  The style is
    looked up in ``style_map`` by, in order, the node's ``PartOfGroup``,
    ``Name`` and ``Type`` attributes; unmapped nodes get ``default_style``.
    Source files carry no per-element author or timestamp, so both are
    supplied by the caller.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise ParseError(f"invalid XML: {e}") from e
    style_map = style_map or {}
    elements = []
    nodes = root.iter("Annotation")
    for n, node in enumerate(nodes):
        ann_type = node.get("Type", "Polygon")
        shape = {
            "polygon": "polygon",
            "spline": "polygon",
            "rectangle": "rectangle",
            "dot": "point",
            "point": "point",
        }.get(ann_type.lower())
        if shape is None:
            raise ParseError(f"Annotation[{n}]: unsupported Type {ann_type!r}")
        coords = []
        for c in node.iter("Coordinate"):
            try:
                coords.append(
                    (int(c.get("Order", len(coords))), float(c.get("X")), float(c.get("Y")))
                )
            except (TypeError, ValueError) as e:
                raise ParseError(f"Annotation[{n}]: bad Coordinate: {e}") from e
        if not coords:
            raise SchemaError(f"Annotation[{n}]: no Coordinate children")
        coords.sort(key=lambda t: t[0])
        style = default_style
        for key in ("PartOfGroup", "Name", "Type"):
            val = node.get(key)
            if val is not None and val in style_map:
                style = style_map[val]
                break
        pts = tuple((x, y) for _, x, y in coords)
        if shape == "rectangle":
            pts = _normalize_rectangle(pts, f"Annotation[{n}]")
        elements.append(
            AnnotationElement(
                id=f"xml-{n + 1:04d}",
                annotator=annotator,
                created=created,
                style=style,
                shape=shape,
                coords=pts,
            )
        )
    return elements


def import_point_csv(
    text: str,
    style_map: dict[str, str] | None = None,
    protocol: Protocol | None = None,
) -> list[AnnotationElement]:
    """Import cell points from CSV with header ``x,y,class,annotator,created``.

    Class names map to styles via ``style_map`` first, then the protocol's
    class-to-style binding when one is given; otherwise the class string is
    used as the style name directly.
    """
    reader = csv.DictReader(io.StringIO(text))
    need = {"x", "y", "class", "annotator", "created"}
    got = set(reader.fieldnames or ())
    if not need <= got:
        raise SchemaError(f"point csv must have columns {sorted(need)}, got {sorted(got)}")
    style_map = style_map or {}
    elements = []
    for n, row in enumerate(reader):
        where = f"row {n + 2}"  # 1-based, after header
        try:
            x, y = float(row["x"]), float(row["y"])
        except (TypeError, ValueError) as e:
            raise ParseError(f"{where}: bad coordinates: {e}") from e
        cls = row["class"]
        if cls in style_map:
            style = style_map[cls]
        elif protocol is not None:
            try:
                style = protocol.style_for_class(cls).style_name
            except KeyError:
                style = protocol.style_for_class("Unknown cell").style_name
        else:
            style = cls
        elements.append(
            AnnotationElement(
                id=f"csv-{n + 1:04d}",
                annotator=row["annotator"],
                created=parse_timestamp(row["created"]),
                style=style,
                shape="point",
                coords=((x, y),),
            )
        )
    return elements


# ---------------------------------------------------------------------------
# box grouping


@dataclass
class BoxScope:
    """A placed box and the elements whose representative point falls
    strictly inside it, split per annotator."""

    box: AnnotationElement
    construct: BoxConstructDef
    members: dict[str, list[AnnotationElement]] = field(default_factory=dict)

    @property
    def window(self) -> tuple[float, float, float, float]:
        (x0, y0), (x1, y1) = self.box.coords[0], self.box.coords[-1]
        return (min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))

    def annotators(self) -> list[str]:
        return list(self.members)

    def all_members(self) -> list[AnnotationElement]:
        return [el for group in self.members.values() for el in group]


def group_into_boxes(
    elements: list[AnnotationElement], protocol: Protocol
) -> list[BoxScope]:
    """Split a document into box scopes.

    An element belongs to a box when its representative point lies strictly
    inside the box rectangle; elements may belong to several overlapping
    boxes.  Box elements themselves are never members.
    """
    constructs = protocol.construct_by_name()
    boxes = [
        BoxScope(box=el, construct=constructs[el.style])
        for el in elements
        if el.style in constructs
    ]
    others = [el for el in elements if el.style not in constructs]
    if not boxes or not others:
        return boxes
    reps = np.array([el.rep_point() for el in others], dtype=float)
    for scope in boxes:
        x0, y0, x1, y1 = scope.window
        inside = (
            (reps[:, 0] > x0)
            & (reps[:, 0] < x1)
            & (reps[:, 1] > y0)
            & (reps[:, 1] < y1)
        )
        for k in np.flatnonzero(inside):
            el = others[int(k)]
            scope.members.setdefault(el.annotator, []).append(el)
    return boxes
