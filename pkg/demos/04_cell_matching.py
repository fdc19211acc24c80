#!/usr/bin/env python3
"""Pair up two annotators' cell dots and score their concordance.

Simulates a field of cells read by two annotators with positional jitter,
a few class confusions, and uneven misses, then runs the matching,
concordance and confusion-matrix pipeline on the result.
"""
import random

from annoqc.cellagreement import concordance, confusion_matrix, match_points, radius_px

MPP = 0.25
RADIUS_UM = 3.0
CLASSES = ["Tumor NP2", "TILs", "Stroma"]

radius = radius_px(RADIUS_UM, MPP)
print(f"match radius: {RADIUS_UM} um at {MPP} mpp = {radius} px")

rng = random.Random(2023)

# 120 true cells, spread out enough that jittered copies stay unambiguous.
truth = []
for k in range(120):
    x = 40.0 * (k % 12) + rng.uniform(0, 10)
    y = 40.0 * (k // 12) + rng.uniform(0, 10)
    truth.append((x, y, rng.choice(CLASSES)))


def read_field(prefix, miss_rate, confuse_rate):
    points, classes = [], {}
    for k, (x, y, cls) in enumerate(truth):
        if rng.random() < miss_rate:
            continue
        pid = f"{prefix}{k:03d}"
        points.append((pid, x + rng.uniform(-3, 3), y + rng.uniform(-3, 3)))
        if rng.random() < confuse_rate:
            cls = rng.choice([c for c in CLASSES if c != cls])
        classes[pid] = cls
    return points, classes


pts_a, cls_a = read_field("a", miss_rate=0.05, confuse_rate=0.0)
pts_b, cls_b = read_field("b", miss_rate=0.12, confuse_rate=0.10)
print(f"annotator a placed {len(pts_a)} dots, annotator b placed {len(pts_b)}")

result = match_points(pts_a, pts_b, radius)
print(f"matched pairs: {len(result.pairs)}  "
      f"(a-only {len(result.unmatched_a)}, b-only {len(result.unmatched_b)})")

stats = concordance(result, cls_a, cls_b)
print(f"\nagreed {stats.agreed}, disagreed {stats.disagreed}, "
      f"only a found {stats.missed_a}, only b found {stats.missed_b}")
print(f"agreed fraction    {stats.agreed_fraction():.4f}")
print(f"disagreed fraction {stats.disagreed_fraction():.4f}")
print(f"missed fraction    {stats.missed_fraction():.4f}")
total = stats.agreed_fraction() + stats.disagreed_fraction() + stats.missed_fraction()
print(f"fractions sum to   {total:.10f}")

cm = confusion_matrix(result, cls_a, cls_b, CLASSES)
print("\nconfusion matrix (rows = a, columns = b):")
for row in cm.to_rows():
    print("  " + "".join(f"{str(v):<12}" for v in row))
print(f"diagonal sum {cm.trace()} == agreed {stats.agreed}")

# Unknown-class dots consume a match slot but never count for or against.
cls_b_u = dict(cls_b)
flipped = sorted(cls_b_u)[:5]
for pid in flipped:
    cls_b_u[pid] = "Unknown cell"
stats_u = concordance(result, cls_a, cls_b_u, unknown_class="Unknown cell")
print(f"\nwith 5 of b's dots relabeled unknown: excluded {stats_u.excluded_unknown}, "
      f"agreed {stats_u.agreed} (was {stats.agreed})")
