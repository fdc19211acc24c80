"""Annotation protocol: the data dictionary a campaign is checked against.

A protocol document declares the box constructs, annotation classes (region
and cell level), drawing styles, completeness rules, thresholds, and grading
boundaries.  Loading validates every invariant; emitting is canonical, so
emit(load(emit(p))) is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

REGION = "region"
CELL = "cell"
LEVELS = (REGION, CELL)

UNKNOWN_REGION = "Unknown region"
UNKNOWN_CELL = "Unknown cell"

# shapes an annotation may legally take at each level
LEGAL_SHAPES = {
    REGION: ("polygon", "rectangle", "line", "text"),
    CELL: ("point", "polygon", "text"),
}

EXCLUSION_CLASS = "Exclusion"


class ProtocolError(ValueError):
    """Base for protocol loading problems."""


class ProtocolParseError(ProtocolError):
    """The document is not well-formed JSON or has the wrong shape."""


class ProtocolValidationError(ProtocolError):
    """One or more declared invariants are violated."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class AnnotationClassDef:
    name: str
    level: str
    description: str = ""


@dataclass
class StyleDef:
    """Drawing style bound to exactly one annotation class."""

    type_name: str
    style_name: str
    shape: str
    line_color: str
    rgb: tuple[int, int, int]

    @property
    def rgb_hex(self) -> str:
        return "%02X%02X%02X" % self.rgb


@dataclass
class BoxConstructDef:
    """A named rectangle kind annotators place to scope their work."""

    name: str
    scope: str  # region | cell
    consensus: bool
    special: bool
    magnification: float
    exhaustive: bool


@dataclass
class CompletenessRule:
    construct: str
    min_count: int
    required_annotators: int = 1


@dataclass
class Thresholds:
    region_magnification: float = 5
    cell_magnification: float = 20
    exhaustiveness_threshold: float = 0.6
    exhaustiveness_threshold_individual: float = 0.8
    match_radius_um: float = 3.0
    blur_slide_reject_fraction: float = 0.6


@dataclass
class Protocol:
    version: str
    objectives: str
    constructs: list[BoxConstructDef]
    region_types: list[AnnotationClassDef]
    cell_types: list[AnnotationClassDef]
    styles: list[StyleDef]
    completeness_rules: list[CompletenessRule]
    thresholds: Thresholds = field(default_factory=Thresholds)
    grade_thresholds: list[int] = field(default_factory=lambda: [5, 7, 9])

    def classes(self) -> list[AnnotationClassDef]:
        return list(self.region_types) + list(self.cell_types)

    def class_by_name(self) -> dict[str, AnnotationClassDef]:
        return {c.name: c for c in self.classes()}

    def style_by_name(self) -> dict[str, StyleDef]:
        return {s.style_name: s for s in self.styles}

    def construct_by_name(self) -> dict[str, BoxConstructDef]:
        return {c.name: c for c in self.constructs}

    def style_for_class(self, class_name: str) -> StyleDef:
        for s in self.styles:
            if s.type_name == class_name:
                return s
        raise KeyError(class_name)

    def resolve_style(self, style_name: str):
        """Map an element's style string to ("style", StyleDef),
        ("construct", BoxConstructDef) or None."""
        s = self.style_by_name().get(style_name)
        if s is not None:
            return ("style", s)
        c = self.construct_by_name().get(style_name)
        if c is not None:
            return ("construct", c)
        return None

    def level_of_class(self, class_name: str) -> str:
        cls = self.class_by_name().get(class_name)
        if cls is None:
            raise KeyError(class_name)
        return cls.level


@dataclass
class Violation:
    """One finding from element validation."""

    element_id: str
    kind: str  # unknown-style | shape-mismatch | degenerate-geometry | out-of-bounds
    detail: str


def _parse_rgb(record: dict, where: str, problems: list[str]) -> tuple[int, int, int]:
    hexval = record.get("rgb", "")
    if not (isinstance(hexval, str) and len(hexval) == 6):
        problems.append(f"{where}: rgb must be 6 hex digits, got {hexval!r}")
        return (0, 0, 0)
    try:
        rgb = tuple(int(hexval[i : i + 2], 16) for i in (0, 2, 4))
    except ValueError:
        problems.append(f"{where}: rgb must be 6 hex digits, got {hexval!r}")
        return (0, 0, 0)
    values = record.get("rgb_values")
    if values is not None and tuple(values) != rgb:
        problems.append(f"{where}: rgb_values {values} disagree with hex {hexval}")
    return rgb  # type: ignore[return-value]


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise ProtocolParseError(f"{where}: missing key {key!r}")
    return record[key]


def parse_protocol(doc: dict) -> Protocol:
    """Build and validate a Protocol from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ProtocolParseError("protocol document must be a JSON object")
    for key in ("constructs", "region_types", "cell_types", "styles"):
        if key not in doc:
            raise ProtocolParseError(f"missing top-level key {key!r}")

    problems: list[str] = []

    constructs = []
    for i, rec in enumerate(doc["constructs"]):
        where = f"constructs[{i}]"
        constructs.append(
            BoxConstructDef(
                name=str(_require(rec, "name", where)),
                scope=str(_require(rec, "scope", where)),
                consensus=bool(_require(rec, "consensus", where)),
                special=bool(_require(rec, "special", where)),
                magnification=_require(rec, "magnification", where),
                exhaustive=bool(_require(rec, "exhaustive", where)),
            )
        )

    def parse_classes(key: str, level: str) -> list[AnnotationClassDef]:
        out = []
        for i, rec in enumerate(doc[key]):
            where = f"{key}[{i}]"
            out.append(
                AnnotationClassDef(
                    name=str(_require(rec, "name", where)),
                    level=level,
                    description=str(rec.get("description", "")),
                )
            )
        return out

    region_types = parse_classes("region_types", REGION)
    cell_types = parse_classes("cell_types", CELL)

    styles = []
    for i, rec in enumerate(doc["styles"]):
        where = f"styles[{i}]"
        styles.append(
            StyleDef(
                type_name=str(_require(rec, "type", where)),
                style_name=str(_require(rec, "style_name", where)),
                shape=str(_require(rec, "shape", where)),
                line_color=str(_require(rec, "line_color", where)),
                rgb=_parse_rgb(rec, where, problems),
            )
        )

    rules = []
    for i, rec in enumerate(doc.get("completeness_rules", [])):
        where = f"completeness_rules[{i}]"
        rules.append(
            CompletenessRule(
                construct=str(_require(rec, "construct", where)),
                min_count=int(_require(rec, "min_count", where)),
                required_annotators=int(rec.get("required_annotators", 1)),
            )
        )

    tdoc = doc.get("thresholds", {})
    defaults = Thresholds()
    thresholds = Thresholds(
        region_magnification=tdoc.get(
            "region_magnification", defaults.region_magnification
        ),
        cell_magnification=tdoc.get("cell_magnification", defaults.cell_magnification),
        exhaustiveness_threshold=tdoc.get(
            "exhaustiveness_threshold", defaults.exhaustiveness_threshold
        ),
        exhaustiveness_threshold_individual=tdoc.get(
            "exhaustiveness_threshold_individual",
            defaults.exhaustiveness_threshold_individual,
        ),
        match_radius_um=tdoc.get("match_radius_um", defaults.match_radius_um),
        blur_slide_reject_fraction=tdoc.get(
            "blur_slide_reject_fraction", defaults.blur_slide_reject_fraction
        ),
    )

    grade_thresholds = [int(x) for x in doc.get("grade_thresholds", [5, 7, 9])]

    p = Protocol(
        version=str(doc.get("version", "")),
        objectives=str(doc.get("objectives", "")),
        constructs=constructs,
        region_types=region_types,
        cell_types=cell_types,
        styles=styles,
        completeness_rules=rules,
        thresholds=thresholds,
        grade_thresholds=grade_thresholds,
    )
    _inject_unknowns(p)
    problems.extend(_validate_protocol(p))
    if problems:
        raise ProtocolValidationError(problems)
    return p


def _inject_unknowns(p: Protocol) -> None:
    """Guarantee an unknown class and style at each level.

    Documents that declare them keep their own records (so emit after load
    reproduces the file); others get deterministic fallbacks appended.
    """
    have_region = any(c.name == UNKNOWN_REGION for c in p.region_types)
    have_cell = any(c.name == UNKNOWN_CELL for c in p.cell_types)
    if not have_region:
        p.region_types.append(
            AnnotationClassDef(
                UNKNOWN_REGION, REGION, "Fallback for unrecognized region annotations"
            )
        )
    if not have_cell:
        p.cell_types.append(
            AnnotationClassDef(
                UNKNOWN_CELL, CELL, "Fallback for unrecognized cell annotations"
            )
        )
    styled = {s.type_name for s in p.styles}
    if UNKNOWN_REGION not in styled:
        p.styles.append(
            StyleDef(UNKNOWN_REGION, "Style_unknown_region", "polygon", "Gray",
                     (128, 128, 128))
        )
    if UNKNOWN_CELL not in styled:
        p.styles.append(
            StyleDef(UNKNOWN_CELL, "Style_unknown_cell", "point", "Gray",
                     (128, 128, 128))
        )


def _validate_protocol(p: Protocol) -> list[str]:
    problems: list[str] = []
    t = p.thresholds

    names = [c.name for c in p.constructs]
    if len(set(names)) != len(names):
        problems.append("construct names are not unique")
    legal_mags = {t.region_magnification, t.cell_magnification}
    for c in p.constructs:
        if c.scope not in LEVELS:
            problems.append(f"construct {c.name}: scope must be region or cell")
        if c.magnification not in legal_mags:
            problems.append(
                f"construct {c.name}: magnification {c.magnification} not one of "
                f"the declared magnifications {sorted(legal_mags)}"
            )

    # class names must be unique within a level, and additionally across
    # levels because style records reference a class by bare name
    for classes, label in ((p.region_types, "region"), (p.cell_types, "cell")):
        cn = [c.name for c in classes]
        if len(set(cn)) != len(cn):
            problems.append(f"{label} class names are not unique")
    all_names = [c.name for c in p.classes()]
    if len(set(all_names)) != len(all_names) and not any(
        "class names are not unique" in msg for msg in problems
    ):
        problems.append("class names collide across levels")

    sn = [s.style_name for s in p.styles]
    if len(set(sn)) != len(sn):
        problems.append("style names are not unique")
    class_map = {c.name: c for c in p.classes()}
    styled_counts: dict[str, int] = {c: 0 for c in class_map}
    for s in p.styles:
        cls = class_map.get(s.type_name)
        if cls is None:
            problems.append(f"style {s.style_name}: unknown class {s.type_name!r}")
            continue
        styled_counts[s.type_name] += 1
        if s.shape not in LEGAL_SHAPES[cls.level]:
            problems.append(
                f"style {s.style_name}: shape {s.shape!r} not legal at "
                f"{cls.level} level"
            )
    for cname, n in styled_counts.items():
        if n != 1:
            problems.append(f"class {cname!r} referenced by {n} styles, expected 1")
    construct_names = set(names)
    for s in p.styles:
        if s.style_name in construct_names:
            problems.append(
                f"style {s.style_name} collides with a construct name"
            )

    by_construct = {c.name: c for c in p.constructs}
    for r in p.completeness_rules:
        c = by_construct.get(r.construct)
        if c is None:
            problems.append(f"completeness rule names unknown construct {r.construct!r}")
            continue
        if r.min_count < 0:
            problems.append(f"rule for {r.construct}: min_count must be >= 0")
        if r.required_annotators < 1:
            problems.append(f"rule for {r.construct}: required_annotators must be >= 1")
        if c.consensus and r.required_annotators < 2:
            problems.append(
                f"rule for {r.construct}: consensus construct needs >= 2 annotators"
            )

    for field_name in ("exhaustiveness_threshold", "exhaustiveness_threshold_individual",
                       "blur_slide_reject_fraction"):
        v = getattr(t, field_name)
        if not 0.0 <= v <= 1.0:
            problems.append(f"thresholds.{field_name} must lie in [0, 1]")
    if t.match_radius_um <= 0:
        problems.append("thresholds.match_radius_um must be positive")
    if t.region_magnification <= 0 or t.cell_magnification <= 0:
        problems.append("threshold magnifications must be positive")

    g = p.grade_thresholds
    increasing = all(a < b for a, b in zip(g, g[1:]))
    if not (g and increasing and g[0] >= 3 and g[-1] == 9):
        problems.append(
            "grade_thresholds must be strictly increasing score sums covering "
            "3..9 (first >= 3, last exactly 9)"
        )
    return problems


def load_protocol(path) -> Protocol:
    """Parse and validate a protocol JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolParseError(f"{path}: {e}") from e
    return parse_protocol(doc)


def default_protocol() -> Protocol:
    """The bundled breast H&E dictionary."""
    blob = resources.files("annoqc").joinpath("data/breast_he_default.json")
    return parse_protocol(json.loads(blob.read_text(encoding="utf-8")))


def protocol_to_doc(p: Protocol) -> dict:
    """Protocol as a plain JSON-ready document in canonical key order."""
    t = p.thresholds
    return {
        "version": p.version,
        "objectives": p.objectives,
        "constructs": [
            {
                "name": c.name,
                "scope": c.scope,
                "consensus": c.consensus,
                "special": c.special,
                "magnification": c.magnification,
                "exhaustive": c.exhaustive,
            }
            for c in p.constructs
        ],
        "region_types": [
            {"name": c.name, "description": c.description} for c in p.region_types
        ],
        "cell_types": [
            {"name": c.name, "description": c.description} for c in p.cell_types
        ],
        "styles": [_style_record(s) for s in p.styles],
        "completeness_rules": [
            {
                "construct": r.construct,
                "min_count": r.min_count,
                "required_annotators": r.required_annotators,
            }
            for r in p.completeness_rules
        ],
        "thresholds": {
            "region_magnification": t.region_magnification,
            "cell_magnification": t.cell_magnification,
            "exhaustiveness_threshold": t.exhaustiveness_threshold,
            "exhaustiveness_threshold_individual": t.exhaustiveness_threshold_individual,
            "match_radius_um": t.match_radius_um,
            "blur_slide_reject_fraction": t.blur_slide_reject_fraction,
        },
        "grade_thresholds": list(p.grade_thresholds),
    }


def _style_record(s: StyleDef) -> dict:
    return {
        "type": s.type_name,
        "style_name": s.style_name,
        "shape": s.shape,
        "line_color": s.line_color,
        "rgb": s.rgb_hex,
    }


def emit_protocol(p: Protocol) -> str:
    """Canonical protocol document text (stable byte-for-byte)."""
    return json.dumps(protocol_to_doc(p), indent=2, ensure_ascii=False) + "\n"


def emit_style_file(p: Protocol) -> str:
    """Canonical styles-only export (one record per style)."""
    return (
        json.dumps([_style_record(s) for s in p.styles], indent=2, ensure_ascii=False)
        + "\n"
    )


def parse_style_records(text: str) -> list[StyleDef]:
    """Inverse of emit_style_file (no cross-checks against a protocol)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolParseError(str(e)) from e
    if not isinstance(doc, list):
        raise ProtocolParseError("style file must be a JSON array")
    problems: list[str] = []
    out = []
    for i, rec in enumerate(doc):
        where = f"styles[{i}]"
        out.append(
            StyleDef(
                type_name=str(_require(rec, "type", where)),
                style_name=str(_require(rec, "style_name", where)),
                shape=str(_require(rec, "shape", where)),
                line_color=str(_require(rec, "line_color", where)),
                rgb=_parse_rgb(rec, where, problems),
            )
        )
    if problems:
        raise ProtocolValidationError(problems)
    return out


def validate_elements(meta, elements, p: Protocol) -> list[Violation]:
    """Check annotation elements against the dictionary.

    ``meta`` (slide dimensions) may be None to skip bounds checks.  Output
    order follows input order, one finding per violated rule.
    """
    styles = p.style_by_name()
    constructs = p.construct_by_name()
    classes = p.class_by_name()
    out: list[Violation] = []
    for el in elements:
        resolved = styles.get(el.style)
        construct = constructs.get(el.style) if resolved is None else None
        if resolved is None and construct is None:
            out.append(
                Violation(el.id, "unknown-style", f"style {el.style!r} not declared")
            )
        else:
            want_shape = resolved.shape if resolved is not None else "rectangle"
            if el.shape != want_shape:
                out.append(
                    Violation(
                        el.id,
                        "shape-mismatch",
                        f"style {el.style!r} draws {want_shape}, element is {el.shape}",
                    )
                )
        problem = _degenerate(el)
        if problem:
            out.append(Violation(el.id, "degenerate-geometry", problem))
        if meta is not None:
            for x, y in el.coords:
                if not (0 <= x <= meta.width_px and 0 <= y <= meta.height_px):
                    out.append(
                        Violation(
                            el.id,
                            "out-of-bounds",
                            f"vertex ({x}, {y}) outside slide "
                            f"{meta.width_px}x{meta.height_px}",
                        )
                    )
                    break
    return out


def _degenerate(el) -> str | None:
    coords = el.coords
    if el.shape == "point":
        if len(coords) != 1:
            return f"point must have exactly 1 vertex, has {len(coords)}"
    elif el.shape == "line":
        if len(set(coords)) < 2:
            return "line needs 2 distinct vertices"
    elif el.shape == "rectangle":
        (x0, y0), (x1, y1) = coords[0], coords[-1]
        if x0 == x1 or y0 == y1:
            return "rectangle has zero width or height"
    elif el.shape == "polygon":
        distinct = set(coords)
        if len(coords) > 1 and coords[0] == coords[-1]:
            distinct = set(coords[:-1])
        if len(distinct) < 3:
            return f"polygon needs 3 distinct vertices, has {len(distinct)}"
    elif el.shape == "text":
        if len(coords) != 1:
            return f"text anchor must be 1 vertex, has {len(coords)}"
    return None
