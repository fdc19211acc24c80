"""Campaign QC metrics over box scopes.

Completeness asks "were the required boxes placed"; exhaustiveness asks
"how much tissue inside a box is annotated"; diversity counts distinct
region types per box; region agreement scores annotator overlap per type.
Summaries aggregate whole campaigns and merge additively.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .annostore import AnnotationElement, BoxScope, WsiMetadata
from .geometry import (
    BinaryMask,
    area_to_mm2,
    jaccard_to_dice,
    mask_jaccard,
    oriented,
    polygon_area,
    rasterize,
    sample_mask,
)
from .protocol import CELL, EXCLUSION_CLASS, REGION, Protocol

AREA_SHAPES = ("polygon", "rectangle")


def eval_downsample(mpp: float, magnification: float) -> int:
    """Raster cell size (base px per cell) for metrics at a box's native
    magnification, assuming the usual mpp*mag = 10 microscope convention."""
    if mpp <= 0 or magnification <= 0:
        raise ValueError("mpp and magnification must be positive")
    return max(1, round(10.0 / (mpp * magnification)))


@dataclass
class MissingItem:
    construct: str
    required: int
    found: int
    required_annotators: int
    found_annotators: int


@dataclass
class CompletenessVerdict:
    passed: bool
    missing: list[MissingItem] = field(default_factory=list)


def check_completeness(scopes: list[BoxScope], protocol: Protocol) -> CompletenessVerdict:
    """Count placed boxes per rule; consensus boxes only count when enough
    distinct annotators worked inside them."""
    by_construct: dict[str, list[BoxScope]] = {}
    for s in scopes:
        by_construct.setdefault(s.construct.name, []).append(s)
    missing: list[MissingItem] = []
    for rule in protocol.completeness_rules:
        boxes = by_construct.get(rule.construct, [])
        annotator_counts = [len(s.members) for s in boxes]
        if protocol.construct_by_name()[rule.construct].consensus:
            found = sum(1 for n in annotator_counts if n >= rule.required_annotators)
        else:
            found = len(boxes)
        if found < rule.min_count:
            missing.append(
                MissingItem(
                    construct=rule.construct,
                    required=rule.min_count,
                    found=found,
                    required_annotators=rule.required_annotators,
                    found_annotators=max(annotator_counts, default=0),
                )
            )
    return CompletenessVerdict(passed=not missing, missing=missing)


def _region_members(scope: BoxScope, protocol: Protocol):
    """Per annotator, the class-resolved area-shaped region elements."""
    classes = protocol.class_by_name()
    styles = protocol.style_by_name()
    out: dict[str, list[tuple[str, AnnotationElement]]] = {}
    for annotator, group in scope.members.items():
        rows = []
        for el in group:
            style = styles.get(el.style)
            if style is None or el.shape not in AREA_SHAPES:
                continue
            cls = classes.get(style.type_name)
            if cls is None or cls.level != REGION:
                continue
            rows.append((cls.name, el))
        if rows:
            out[annotator] = rows
    return out


def _element_rings(el: AnnotationElement):
    if el.shape == "rectangle":
        (x0, y0), (x1, y1) = el.coords[0], el.coords[-1]
        return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    return list(el.coords)


def _union_raster(elements, window, ds) -> BinaryMask:
    rings = [oriented(_element_rings(el)) for el in elements]
    return rasterize(rings, window, ds)


@dataclass
class BoxMetrics:
    box_id: str
    construct: str
    consensus: bool
    exhaustiveness: float
    diversity: int
    empty_box: bool
    agreement: list["TypeAgreement"] = field(default_factory=list)


@dataclass
class TypeAgreement:
    type_name: str
    jaccard: float
    dice: float
    union_area_mm2: float
    both_empty: bool


def box_exhaustiveness(
    scope: BoxScope,
    protocol: Protocol,
    mpp: float,
    tissue: BinaryMask | None = None,
    downsample: int | None = None,
    any_type: bool = False,
) -> float:
    """Fraction of tissue cells in the box covered by region annotations.

    Individual boxes use the union over all annotators.  Consensus boxes
    count a cell only where every contributing annotator marked it with the
    same type (or any type at all, with ``any_type``).  Exclusion-class
    regions from any annotator are subtracted from the tissue denominator.
    A box with no tissue left scores 1.0 (nothing to annotate).
    """
    window = scope.window
    ds = downsample or eval_downsample(mpp, scope.construct.magnification)
    members = _region_members(scope, protocol)

    if tissue is None:
        denom = rasterize(
            [[(window[0], window[1]), (window[2], window[1]),
              (window[2], window[3]), (window[0], window[3])]], window, ds
        )
    else:
        denom = sample_mask(tissue, window, ds)
    exclusions = [
        el for rows in members.values() for cls, el in rows if cls == EXCLUSION_CLASS
    ]
    if exclusions:
        excl = _union_raster(exclusions, window, ds)
        denom = BinaryMask(
            denom.width, denom.height, denom.downsample, denom.origin,
            denom.data & ~excl.data,
        )
    total = denom.popcount()
    if total == 0:
        return 1.0

    informative = {
        ann: [(c, el) for c, el in rows if c != EXCLUSION_CLASS]
        for ann, rows in members.items()
    }
    informative = {ann: rows for ann, rows in informative.items() if rows}
    if not informative:
        return 0.0

    if not scope.construct.consensus:
        covered = _union_raster(
            [el for rows in informative.values() for _, el in rows], window, ds
        ).data
    elif any_type:
        covered = None
        for rows in informative.values():
            mask = _union_raster([el for _, el in rows], window, ds).data
            covered = mask if covered is None else (covered & mask)
    else:
        # same-type consensus: a cell counts when every annotator gave it
        # one common type
        types = sorted({c for rows in informative.values() for c, _ in rows})
        covered = np.zeros(denom.data.shape, dtype=bool)
        for t in types:
            agreed = None
            for rows in informative.values():
                mine = [el for c, el in rows if c == t]
                mask = (
                    _union_raster(mine, window, ds).data
                    if mine
                    else np.zeros(denom.data.shape, dtype=bool)
                )
                agreed = mask if agreed is None else (agreed & mask)
                if not agreed.any():
                    break
            covered |= agreed
    return int((covered & denom.data).sum()) / total


def box_diversity(scope: BoxScope, protocol: Protocol) -> tuple[int, bool]:
    """Distinct region types drawn in the box; (0, flagged) when none."""
    members = _region_members(scope, protocol)
    types = {c for rows in members.values() for c, _ in rows}
    if not types:
        return 0, True
    return len(types), False


def region_agreement(
    scope: BoxScope,
    protocol: Protocol,
    mpp: float,
    downsample: int | None = None,
) -> list[TypeAgreement]:
    """Per-type overlap between annotators in one box.

    Types drawn by any annotator are scored for all annotators who drew
    regions in the box; not having drawn a type reads as an empty mask.
    More than two annotators average pairwise.  Needs at least two region
    annotators, otherwise the list is empty.
    """
    window = scope.window
    ds = downsample or eval_downsample(mpp, scope.construct.magnification)
    members = _region_members(scope, protocol)
    annotators = sorted(members)
    if len(annotators) < 2:
        return []
    types = sorted({c for rows in members.values() for c, _ in rows})
    out = []
    for t in types:
        masks = []
        for ann in annotators:
            mine = [el for c, el in members[ann] if c == t]
            masks.append(_union_raster(mine, window, ds))
        js = []
        union = np.zeros(masks[0].data.shape, dtype=bool)
        for m in masks:
            union |= m.data
        for i in range(len(masks)):
            for k in range(i + 1, len(masks)):
                js.append(mask_jaccard(masks[i], masks[k]))
        j = float(np.mean(js))
        both_empty = not union.any()
        out.append(
            TypeAgreement(
                type_name=t,
                jaccard=j,
                dice=jaccard_to_dice(j),
                union_area_mm2=area_to_mm2(float(union.sum()) * ds * ds, mpp),
                both_empty=both_empty,
            )
        )
    return out


def compute_box_metrics(
    scope: BoxScope,
    protocol: Protocol,
    mpp: float,
    tissue: BinaryMask | None = None,
    downsample: int | None = None,
    any_type: bool = False,
) -> BoxMetrics:
    """Exhaustiveness, diversity and (consensus) agreement for one region box."""
    exh = box_exhaustiveness(scope, protocol, mpp, tissue, downsample, any_type)
    div, empty = box_diversity(scope, protocol)
    agreement = (
        region_agreement(scope, protocol, mpp, downsample)
        if scope.construct.consensus
        else []
    )
    return BoxMetrics(
        box_id=scope.box.id,
        construct=scope.construct.name,
        consensus=scope.construct.consensus,
        exhaustiveness=exh,
        diversity=div,
        empty_box=empty,
        agreement=agreement,
    )


def grade_from_scores(
    tubule: int, pleomorphism: int, mitosis: int, boundaries: list[int]
) -> int:
    """Histologic grade from three 1..3 component scores.

    The summed score falls into bands closed on the right: with boundaries
    [5, 7, 9], sums 3-5 grade 1, 6-7 grade 2, 8-9 grade 3.
    """
    for name, v in (("tubule", tubule), ("pleomorphism", pleomorphism),
                    ("mitosis", mitosis)):
        if not (isinstance(v, int) and 1 <= v <= 3):
            raise ValueError(f"{name} score must be an integer in 1..3, got {v!r}")
    total = tubule + pleomorphism + mitosis
    for i, bound in enumerate(boundaries):
        if total <= bound:
            return i + 1
    raise ValueError(f"score sum {total} above the last boundary {boundaries[-1]}")


# ---------------------------------------------------------------------------
# campaign summaries


@dataclass
class ProjectSummary:
    """Additive aggregate over annotation documents."""

    n_wsis: int = 0
    cases: set = field(default_factory=set)
    shape_counts: dict = field(default_factory=dict)
    region_counts: dict = field(default_factory=dict)
    region_areas_mm2: dict = field(default_factory=dict)
    cell_counts: dict = field(default_factory=dict)
    construct_counts: dict = field(default_factory=dict)
    daily_increments: dict = field(default_factory=dict)  # date -> level -> n
    box_rows: list = field(default_factory=list)

    def total_boxes(self) -> int:
        return sum(self.construct_counts.values())

    def merge(self, other: "ProjectSummary") -> "ProjectSummary":
        out = ProjectSummary()
        out.n_wsis = self.n_wsis + other.n_wsis
        out.cases = self.cases | other.cases
        for mine, theirs, target in (
            (self.shape_counts, other.shape_counts, out.shape_counts),
            (self.region_counts, other.region_counts, out.region_counts),
            (self.cell_counts, other.cell_counts, out.cell_counts),
            (self.construct_counts, other.construct_counts, out.construct_counts),
        ):
            for d in (mine, theirs):
                for k, v in d.items():
                    target[k] = target.get(k, 0) + v
        for d in (self.region_areas_mm2, other.region_areas_mm2):
            for k, v in d.items():
                out.region_areas_mm2[k] = out.region_areas_mm2.get(k, 0.0) + v
        for d in (self.daily_increments, other.daily_increments):
            for day, levels in d.items():
                slot = out.daily_increments.setdefault(day, {})
                for level, n in levels.items():
                    slot[level] = slot.get(level, 0) + n
        out.box_rows = sorted(
            self.box_rows + other.box_rows, key=lambda r: (r["wsi_id"], r["box_id"])
        )
        return out


def summarize(
    docs,
    protocol: Protocol,
    box_metrics: dict[str, list[BoxMetrics]] | None = None,
) -> ProjectSummary:
    """Aggregate counts, areas, construct usage and a daily timeline.

    ``docs`` yields (WsiMetadata, elements) pairs.  ``box_metrics`` maps
    wsi id to computed BoxMetrics and feeds the exhaustiveness/diversity
    rows; without it those rows stay empty.
    """
    styles = protocol.style_by_name()
    classes = protocol.class_by_name()
    constructs = protocol.construct_by_name()
    s = ProjectSummary()
    for meta, elements in docs:
        s.n_wsis += 1
        s.cases.add(meta.case_id)
        for el in elements:
            s.shape_counts[el.shape] = s.shape_counts.get(el.shape, 0) + 1
            if el.style in constructs:
                s.construct_counts[el.style] = s.construct_counts.get(el.style, 0) + 1
                continue
            style = styles.get(el.style)
            if style is None:
                continue
            cls = classes.get(style.type_name)
            if cls is None:
                continue
            if cls.level == REGION:
                s.region_counts[cls.name] = s.region_counts.get(cls.name, 0) + 1
                area = 0.0
                if el.shape == "polygon" and len(el.coords) >= 3:
                    area = polygon_area(el.coords)
                elif el.shape == "rectangle":
                    (x0, y0), (x1, y1) = el.coords[0], el.coords[-1]
                    area = abs((x1 - x0) * (y1 - y0))
                s.region_areas_mm2[cls.name] = s.region_areas_mm2.get(
                    cls.name, 0.0
                ) + area_to_mm2(area, meta.mpp)
                level = REGION
            elif cls.level == CELL:
                s.cell_counts[cls.name] = s.cell_counts.get(cls.name, 0) + 1
                level = CELL
            else:  # pragma: no cover
                continue
            day = el.created.date().isoformat()
            slot = s.daily_increments.setdefault(day, {})
            slot[level] = slot.get(level, 0) + 1
        if box_metrics and meta.id in box_metrics:
            for bm in box_metrics[meta.id]:
                s.box_rows.append(
                    {
                        "wsi_id": meta.id,
                        "box_id": bm.box_id,
                        "construct": bm.construct,
                        "consensus": bm.consensus,
                        "exhaustiveness": bm.exhaustiveness,
                        "diversity": bm.diversity,
                        "empty_box": bm.empty_box,
                    }
                )
    s.box_rows.sort(key=lambda r: (r["wsi_id"], r["box_id"]))
    return s


def summary_to_doc(s: ProjectSummary, protocol: Protocol) -> dict:
    """JSON-ready summary document with deterministic ordering."""
    region_order = [c.name for c in protocol.region_types]
    cell_order = [c.name for c in protocol.cell_types]
    construct_order = [c.name for c in protocol.constructs]
    timeline = []
    running = {REGION: 0, CELL: 0}
    for day in sorted(s.daily_increments):
        for level in (REGION, CELL):
            inc = s.daily_increments[day].get(level, 0)
            if inc:
                running[level] += inc
                timeline.append(
                    {"date": day, "level": level, "cumulative_count": running[level]}
                )
    return {
        "n_wsis": s.n_wsis,
        "n_cases": len(s.cases),
        "shape_counts": {k: s.shape_counts[k] for k in sorted(s.shape_counts)},
        "regions": [
            {
                "type": name,
                "count": s.region_counts.get(name, 0),
                "area_mm2": round(s.region_areas_mm2.get(name, 0.0), 6),
            }
            for name in region_order
            if s.region_counts.get(name, 0)
        ],
        "cells": [
            {"type": name, "count": s.cell_counts.get(name, 0)}
            for name in cell_order
            if s.cell_counts.get(name, 0)
        ],
        "constructs": [
            {"construct": name, "count": s.construct_counts.get(name, 0)}
            for name in construct_order
            if s.construct_counts.get(name, 0)
        ],
        "total_boxes": s.total_boxes(),
        "timeline": timeline,
        "boxes": s.box_rows,
    }


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def region_summary_csv(s: ProjectSummary, protocol: Protocol) -> str:
    rows = [["region", "count", "area_mm2"]]
    for c in protocol.region_types:
        n = s.region_counts.get(c.name, 0)
        if n:
            rows.append([c.name, n, "%.2f" % s.region_areas_mm2.get(c.name, 0.0)])
    rows.append(
        ["Total", sum(s.region_counts.values()),
         "%.2f" % sum(s.region_areas_mm2.values())]
    )
    return _csv(rows)


def cell_summary_csv(s: ProjectSummary, protocol: Protocol) -> str:
    rows = [["cell_type", "count"]]
    for c in protocol.cell_types:
        n = s.cell_counts.get(c.name, 0)
        if n:
            rows.append([c.name, n])
    rows.append(["Total", sum(s.cell_counts.values())])
    return _csv(rows)


def construct_usage_csv(s: ProjectSummary, protocol: Protocol) -> str:
    rows = [["construct", "count"]]
    for c in protocol.constructs:
        n = s.construct_counts.get(c.name, 0)
        if n:
            rows.append([c.name, n])
    rows.append(["Total", s.total_boxes()])
    return _csv(rows)


def timeline_csv(s: ProjectSummary, protocol: Protocol) -> str:
    doc = summary_to_doc(s, protocol)
    rows = [["date", "level", "cumulative_count"]]
    for r in doc["timeline"]:
        rows.append([r["date"], r["level"], r["cumulative_count"]])
    return _csv(rows)


def box_rows_csv(s: ProjectSummary) -> str:
    rows = [["wsi_id", "box_id", "construct", "consensus", "exhaustiveness",
             "diversity", "empty_box"]]
    for r in s.box_rows:
        rows.append(
            [
                r["wsi_id"],
                r["box_id"],
                r["construct"],
                int(r["consensus"]),
                "%.6f" % r["exhaustiveness"],
                r["diversity"],
                int(r["empty_box"]),
            ]
        )
    return _csv(rows)
