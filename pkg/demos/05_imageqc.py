#!/usr/bin/env python3
"""Screen a synthetic slide thumbnail for pen ink, coverslip edge and blur.

Builds the image from scratch: white glass, a textured pink tissue block,
a gaussian-blurred stripe and a blue pen stroke. Then runs the full
screening pipeline and writes the masks and a colored overlay.
"""
import tempfile
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from annoqc.imageqc import ImageQcParams, Thumbnail, overlay_png, result_to_doc, run_imageqc

W, H = 1024, 768
img = np.full((H, W, 3), 245, dtype=np.uint8)

# Tissue: a pink block with a checkerboard texture so sharp tiles have
# strong local gradients.
x0, y0, x1, y1 = 128, 128, 896, 640
cells = (np.indices(((y1 - y0) // 32, (x1 - x0) // 32)).sum(axis=0) % 2) * 60 - 30
texture = np.kron(cells, np.ones((32, 32), dtype=np.int16))
base = np.array([190, 135, 160], dtype=np.int16)
block = np.clip(base[None, None, :] + texture[:, :, None], 0, 255).astype(np.uint8)
img[y0:y1, x0:x1] = block

# Blur the right third of the tissue.
bx = x0 + 2 * (x1 - x0) // 3
blurred = gaussian_filter(img[y0:y1, bx:x1].astype(float), sigma=(6, 6, 0))
img[y0:y1, bx:x1] = np.clip(blurred, 0, 255).astype(np.uint8)

# A blue marker stroke across the top of the glass.
img[40:70, 100:700] = (40, 60, 200)

thumb = Thumbnail(img, downsample=32.0, mpp=0.25)

# The stock tile bar expects defocus to wipe texture out almost completely
# at thumbnail scale; the synthetic checkerboard keeps more residual
# contrast than real tissue, so the demo lowers the per-tile bar a bit.
params = ImageQcParams(tile_blur_threshold=0.7)
result = run_imageqc(thumb, params)

print(f"decision: {result.decision}"
      + (f" ({result.reason})" if result.reason else ""))
print(f"blurry tiles: {result.blurry_tiles} of {result.counted_tiles} counted"
      f" -> fraction {result.blurry_fraction:.3f}")
print(f"mask pixels: tissue {result.tissue.popcount()}, "
      f"pen {result.pen.popcount()}, coverslip {result.coverslip.popcount()}")

overlap = (
    int((result.tissue.data & result.pen.data).sum())
    + int((result.tissue.data & result.coverslip.data).sum())
    + int((result.pen.data & result.coverslip.data).sum())
)
print(f"pairwise mask overlap (must be 0): {overlap}")

# A much stricter rejection bar flips the verdict.
strict = run_imageqc(thumb, params, reject_fraction=0.25)
print(f"with a 25% blur budget the verdict becomes: {strict.decision}"
      + (f" ({strict.reason})" if strict.reason else ""))

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    overlay_png(thumb, result).save(out / "overlay.png")
    (out / "tissue.pbm").write_bytes(result.tissue.to_pbm())
    (out / "pen.pbm").write_bytes(result.pen.to_pbm())
    doc = result_to_doc(result)
    written = sorted(p.name for p in out.iterdir())
    print(f"\nwrote {written}")
    print(f"json report carries {len(doc['tiles'])} tile records and "
          f"keys {sorted(k for k in doc if k != 'tiles')}")
