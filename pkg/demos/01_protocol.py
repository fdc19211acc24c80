#!/usr/bin/env python3
"""Walk through the bundled annotation dictionary.

Shows what a protocol contains (box constructs, annotation classes,
drawing styles, completeness rules, thresholds) and proves the emit/load
round trip is byte-stable.
"""
import tempfile
from pathlib import Path

from annoqc.protocol import default_protocol, emit_protocol, emit_style_file, load_protocol

proto = default_protocol()

print(f"dictionary version: {proto.version}")
print(f"objectives: {proto.objectives}")
print()

print(f"{len(proto.constructs)} box constructs:")
print(f"  {'name':<24} {'scope':<8} {'mag':>5}  consensus  exhaustive")
for c in proto.constructs:
    print(
        f"  {c.name:<24} {c.scope:<8} {c.magnification:>5.0f}"
        f"  {'yes' if c.consensus else 'no':<9}  {'yes' if c.exhaustive else 'no'}"
    )
print()

regions = proto.region_types
cells = proto.cell_types
print(f"{len(regions)} region classes, {len(cells)} cell classes")
print("  regions:", ", ".join(c.name for c in regions))
print("  cells:  ", ", ".join(c.name for c in cells))
print()

print(f"{len(proto.styles)} drawing styles, e.g.")
for s in proto.styles[:4]:
    print(f"  {s.style_name:<28} {s.shape:<10} #{s.rgb_hex}")
print()

print("completeness rules (what every case must contain):")
for r in proto.completeness_rules:
    who = f"{r.required_annotators} annotator(s)"
    print(f"  {r.construct}: at least {r.min_count} boxes from {who}")
print()

t = proto.thresholds
print("thresholds:")
print(f"  consensus exhaustiveness  {t.exhaustiveness_threshold}")
print(f"  individual exhaustiveness {t.exhaustiveness_threshold_individual}")
print(f"  cell match radius         {t.match_radius_um} um")
print(f"  blur reject fraction      {t.blur_slide_reject_fraction}")
print()

# Round trip: emit -> load -> emit must reproduce the bytes exactly.
text = emit_protocol(proto)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "protocol.json"
    path.write_text(text, encoding="utf-8")
    again = emit_protocol(load_protocol(path))
print(f"emit/load/emit byte-identical: {text == again}")
print()

print("styles-only export starts like this:")
for line in emit_style_file(proto).splitlines()[:6]:
    print(f"  {line}")
