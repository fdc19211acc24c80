#!/usr/bin/env python3
"""Score region annotations from two readers inside one consensus box.

Covers the raster overlap machinery (jaccard/dice on pixel masks), the
per-type agreement report, and the exhaustiveness and diversity numbers
a box earns.
"""
from datetime import datetime, timezone

from annoqc.annostore import AnnotationElement, group_into_boxes
from annoqc.geometry import mask_jaccard, rasterize, rectangle_window
from annoqc.protocol import default_protocol
from annoqc.qcmetrics import compute_box_metrics, eval_downsample

proto = default_protocol()
t0 = datetime(2023, 5, 2, 14, 0, tzinfo=timezone.utc)
MPP = 0.25


def el(eid, who, style, shape, coords):
    return AnnotationElement(
        id=eid, annotator=who, created=t0, style=style, shape=shape,
        coords=tuple((float(x), float(y)) for x, y in coords),
    )


# Warm-up: two shifted rectangles, rasterized overlap vs the exact answer.
window = rectangle_window([(0, 0), (1000, 1000)])
a = rasterize([[(100, 100), (600, 100), (600, 600), (100, 600)]], window, 1)
b = rasterize([[(350, 350), (850, 350), (850, 850), (350, 850)]], window, 1)
inter = 250 * 250
union = 2 * 500 * 500 - inter
print(f"two 500px squares, 250px offset overlap:")
print(f"  raster jaccard   {mask_jaccard(a, b):.6f}")
print(f"  analytic jaccard {inter / union:.6f}")
print()

# A consensus box with two readers covering the same footprint. They agree
# the bulk is tumor; the left band is where they split, alice calling it
# tumor and bob calling it stroma.
box = el("B1", "alice", "Box_All_Region_5x", "rectangle", [(0, 0), (4000, 4000)])
tumor_a = el("a1", "alice", "HE_Region_tumor_non_tubular", "polygon",
             [(400, 800), (3800, 800), (3800, 3800), (400, 3800)])
tumor_b = el("b1", "bob", "HE_Region_tumor_non_tubular", "polygon",
             [(1000, 800), (3800, 800), (3800, 3800), (1000, 3800)])
stroma_b = el("b2", "bob", "HE_Region_stroma_fibroblastic", "polygon",
              [(400, 800), (1000, 800), (1000, 3800), (400, 3800)])

scopes = group_into_boxes([box, tumor_a, tumor_b, stroma_b], proto)
scope = scopes[0]
ds = eval_downsample(MPP, scope.construct.magnification)
print(f"box {scope.box.id}: construct {scope.construct.name}, "
      f"evaluated at downsample {ds}")

metrics = compute_box_metrics(scope, proto, MPP)
print(f"exhaustiveness (same-type consensus): {metrics.exhaustiveness:.4f}")
print(f"diversity: {metrics.diversity} region types")
print("per-type agreement:")
for t in metrics.agreement:
    print(f"  {t.type_name:<28} jaccard {t.jaccard:.4f}  dice {t.dice:.4f}"
          f"  union {t.union_area_mm2:.3f} mm^2")
print()

# The strict consensus rule only credits pixels where both readers chose
# the same type. Relaxing to "any reader drew anything here" shows how much
# of the shortfall is type disagreement rather than bare glass.
loose = compute_box_metrics(scope, proto, MPP, any_type=True)
print(f"exhaustiveness if any annotation counts: {loose.exhaustiveness:.4f}")
print()

# An individual (non-consensus) box takes the union over readers instead,
# and skips the agreement report entirely.
ibox = el("B2", "alice", "Box_Region_5x", "rectangle", [(0, 0), (4000, 4000)])
iscopes = group_into_boxes([ibox, tumor_a, tumor_b, stroma_b], proto)
imetrics = compute_box_metrics(iscopes[0], proto, MPP)
print(f"same content in an individual box: exhaustiveness "
      f"{imetrics.exhaustiveness:.4f}, agreement entries {len(imetrics.agreement)}")
