#!/usr/bin/env python3
"""Build an annotation document by hand, save it, reload it, validate it.

Also demonstrates the two import paths for data coming from other tools:
viewer XML polygon exports and plain x,y,class CSV point lists.
"""
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from annoqc.annostore import (
    AnnotationElement,
    WsiMetadata,
    export_annotations,
    group_into_boxes,
    import_point_csv,
    import_xml_polygons,
    load_annotations,
    save_annotations,
)
from annoqc.protocol import default_protocol, validate_elements

proto = default_protocol()
t0 = datetime(2023, 3, 14, 9, 30, tzinfo=timezone.utc)

meta = WsiMetadata(
    id="demo-wsi-001",
    case_id="case-17",
    stain="H&E",
    width_px=40_000,
    height_px=30_000,
    mpp=0.25,
)

# One work box, one region polygon inside it, three cell points.
elements = [
    AnnotationElement(
        id="b1", annotator="alice", created=t0, style="Box_Region_5x",
        shape="rectangle", coords=((1000.0, 1000.0), (5000.0, 4000.0)),
    ),
    AnnotationElement(
        id="r1", annotator="alice", created=t0, style="HE_Region_tumor_non_tubular",
        shape="polygon",
        coords=((1200.0, 1200.0), (3000.0, 1300.0), (2800.0, 3500.0), (1100.0, 3200.0)),
    ),
]
for k, (x, y) in enumerate([(1500, 1500), (2100, 2400), (2650, 1900)], start=1):
    elements.append(
        AnnotationElement(
            id=f"c{k}", annotator="alice", created=t0, style="HE_Cell_tumor_NP2",
            shape="point", coords=((float(x), float(y)),),
        )
    )

print(f"built {meta.id} with {len(elements)} elements")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo-wsi-001.json"
    save_annotations(path, meta, elements)
    print(f"saved to {path.name} ({path.stat().st_size} bytes)")

    meta2, elements2 = load_annotations(path)
    same = export_annotations(meta, elements) == export_annotations(meta2, elements2)
    print(f"reload reproduces the document: {same}")

violations = validate_elements(meta, elements, proto)
print(f"violations in the clean document: {len(violations)}")

# Now break two things on purpose and validate again.
broken = elements + [
    AnnotationElement(
        id="bad1", annotator="alice", created=t0, style="HE_Cell_martian",
        shape="point", coords=((10.0, 10.0),),
    ),
    AnnotationElement(
        id="bad2", annotator="alice", created=t0, style="HE_Cell_mitosis",
        shape="point", coords=((99_999.0, 5.0),),
    ),
]
print("\nafter adding an unknown style and an off-slide point:")
for v in validate_elements(meta, broken, proto):
    print(f"  {v.element_id}: {v.kind}: {v.detail}")

scopes = group_into_boxes(elements, proto)
print(f"\nbox grouping found {len(scopes)} box(es):")
for s in scopes:
    print(f"  {s.construct.name} drawn by {s.box.annotator}: {len(s.members)} member elements")

# Import path 1: viewer XML with polygon coordinates.
xml = """<ASAP_Annotations><Annotations>
  <Annotation Name="roi-1" Type="Polygon" PartOfGroup="tumor">
    <Coordinates>
      <Coordinate Order="0" X="100" Y="100"/>
      <Coordinate Order="1" X="400" Y="120"/>
      <Coordinate Order="2" X="380" Y="420"/>
    </Coordinates>
  </Annotation>
</Annotations></ASAP_Annotations>"""
from_xml = import_xml_polygons(
    xml, annotator="bob", created=t0,
    style_map={"tumor": "HE_Region_tumor_non_tubular"},
)
print(f"\nXML import: {len(from_xml)} element(s), first is a "
      f"{from_xml[0].shape} styled {from_xml[0].style}")

# Import path 2: point CSV, classes resolved through the dictionary.
csv_text = (
    "x,y,class,annotator,created\n"
    "120,130,Mitosis,carol,2023-03-14T10:00:00Z\n"
    "220,230,TILs,carol,2023-03-14T10:00:05Z\n"
    "320,330,Never heard of it,carol,2023-03-14T10:00:10Z\n"
)
from_csv = import_point_csv(csv_text, protocol=proto)
print("CSV import:")
for el in from_csv:
    print(f"  {el.id} at {el.coords[0]} -> {el.style}")
