"""Thumbnail screening: artifact masks, tissue extraction, focus check.

The pipeline runs five steps on a slide thumbnail: pen-marker detection,
coverslip-edge detection, Otsu tissue extraction, a tile-level sharpness map
of the perceptual-blur kind, and morphological cleanup.  A slide is rejected
when the blurry share of its tissue exceeds a threshold, or when no tissue
is found at all.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import BinaryMask

log = logging.getLogger(__name__)

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class Thumbnail:
    """RGB pixels at a known downsample from the base resolution."""

    pixels: np.ndarray  # uint8 (h, w, 3)
    downsample: float
    mpp: float

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("thumbnail pixels must be (h, w, 3) uint8")
        if self.downsample < 1 or self.mpp <= 0:
            raise ValueError("downsample must be >= 1 and mpp positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def load_thumbnail(path, downsample: float = 1.0, mpp: float = 0.25) -> Thumbnail:
    """Read an image file; a sidecar ``<name>.json`` may override
    downsample/mpp."""
    p = Path(path)
    img = np.asarray(Image.open(p).convert("RGB"))
    sidecar = p.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        downsample = meta.get("downsample", downsample)
        mpp = meta.get("mpp", mpp)
    return Thumbnail(img, downsample, mpp)


@dataclass
class ImageQcParams:
    # pen detection
    near_white_v: float = 0.95
    near_white_s: float = 0.10
    ink_black_v: float = 0.20
    pen_s_min: float = 0.40
    pen_v_min: float = 0.20
    # hue bands in degrees; a band may wrap past 360
    pen_hue_bands: tuple = ((200.0, 260.0), (90.0, 160.0), (340.0, 20.0))
    # coverslip edge
    margin_fraction: float = 0.05
    margin_luminance_factor: float = 0.35
    margin_dilate: int = 2
    # blur map
    tile_px: int = 64
    tile_blur_threshold: float = 0.85
    tile_tissue_fraction: float = 0.5
    blur_reject_fraction: float = 0.6
    blur_denominator: str = "tissue"  # or "slide"
    # cleanup
    min_object_px: int = 64
    max_hole_px: int = 64

    def __post_init__(self) -> None:
        if self.tile_px < 16:
            raise ValueError("tile_px must be >= 16")
        if self.blur_denominator not in ("tissue", "slide"):
            raise ValueError("blur_denominator must be 'tissue' or 'slide'")
        if not 0.0 <= self.blur_reject_fraction <= 1.0:
            raise ValueError("blur_reject_fraction must lie in [0, 1]")


def rgb_to_hsv(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB (uint8) to hue in degrees, saturation and value in
    [0, 1]."""
    arr = img.astype(np.float64) / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    mx = arr.max(axis=-1)
    mn = arr.min(axis=-1)
    d = mx - mn
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        hr = np.where(d > 0, ((g - b) / d) % 6.0, 0.0)
        hg = np.where(d > 0, (b - r) / d + 2.0, 0.0)
        hb = np.where(d > 0, (r - g) / d + 4.0, 0.0)
    h = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    h = np.where(d > 0, h * 60.0, 0.0)
    return h, s, mx


def luminance(img: np.ndarray) -> np.ndarray:
    arr = img.astype(np.float64) / 255.0
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


def _in_hue_band(h: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    if lo <= hi:
        return (h >= lo) & (h <= hi)
    return (h >= lo) | (h <= hi)  # wrapping band


def _mask(thumb: Thumbnail, data: np.ndarray) -> BinaryMask:
    h, w = data.shape
    return BinaryMask(w, h, thumb.downsample, (0.0, 0.0), data)


def detect_pen(thumb: Thumbnail, params: ImageQcParams | None = None) -> BinaryMask:
    """Marker-ink pixels: saturated hues in the marker bands, or near-black
    ink, never the near-white background."""
    p = params or ImageQcParams()
    h, s, v = rgb_to_hsv(thumb.pixels)
    near_white = (v >= p.near_white_v) & (s <= p.near_white_s)
    ink_black = v <= p.ink_black_v
    colored = (s >= p.pen_s_min) & (v >= p.pen_v_min)
    in_band = np.zeros(h.shape, dtype=bool)
    for band in p.pen_hue_bands:
        in_band |= _in_hue_band(h, band)
    return _mask(thumb, ~near_white & (ink_black | (colored & in_band)))


def detect_coverslip_edge(
    thumb: Thumbnail, params: ImageQcParams | None = None
) -> BinaryMask:
    """Dark full rows/columns within the outer margin, slightly dilated.

    Coverslip borders show up as long dark streaks hugging the image edge;
    a row or column in the margin whose mean luminance drops below a
    fraction of the global median is flagged whole.
    """
    p = params or ImageQcParams()
    lum = luminance(thumb.pixels)
    h, w = lum.shape
    ref = float(np.median(lum)) * p.margin_luminance_factor
    my = max(1, int(np.ceil(h * p.margin_fraction)))
    mx = max(1, int(np.ceil(w * p.margin_fraction)))
    out = np.zeros((h, w), dtype=bool)
    row_means = lum.mean(axis=1)
    col_means = lum.mean(axis=0)
    for i in list(range(my)) + list(range(h - my, h)):
        if row_means[i] < ref:
            out[i, :] = True
    for j in list(range(mx)) + list(range(w - mx, w)):
        if col_means[j] < ref:
            out[:, j] = True
    if out.any() and p.margin_dilate > 0:
        out = ndimage.binary_dilation(out, structure=EIGHT, iterations=p.margin_dilate)
    return _mask(thumb, out)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Split point maximizing between-class variance on a [0, 1] sample."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("otsu needs at least one value")
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    if total == 0:  # pragma: no cover
        raise ValueError("histogram is empty")
    centers = (edges[:-1] + edges[1:]) / 2.0
    p = hist / total
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_total * w0 - mu) ** 2 / (w0 * (1.0 - w0))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    k = int(np.argmax(sigma_b))
    return float(centers[k])


def detect_tissue(
    thumb: Thumbnail,
    params: ImageQcParams | None = None,
    exclude: np.ndarray | None = None,
) -> BinaryMask:
    """Otsu threshold on saturation, ignoring excluded (artifact) pixels."""
    _, s, _ = rgb_to_hsv(thumb.pixels)
    keep = np.ones(s.shape, dtype=bool) if exclude is None else ~exclude
    sample = s[keep]
    if sample.size == 0 or float(sample.max()) == float(sample.min()):
        return _mask(thumb, np.zeros(s.shape, dtype=bool))
    t = otsu_threshold(sample)
    return _mask(thumb, (s > t) & keep)


def morphological_cleanup(
    mask: BinaryMask,
    min_object_px: int = 64,
    max_hole_px: int = 64,
) -> BinaryMask:
    """Drop specks smaller than ``min_object_px`` (8-connected), then fill
    enclosed holes smaller than ``max_hole_px`` (4-connected).  Applying it
    twice changes nothing."""
    data = mask.data.copy()
    if min_object_px > 1 and data.any():
        labels, n = ndimage.label(data, structure=EIGHT)
        if n:
            sizes = np.bincount(labels.ravel())
            kill = sizes < min_object_px
            kill[0] = False
            data[kill[labels]] = False
    if max_hole_px > 0 and data.any():
        inv = ~data
        labels, n = ndimage.label(inv, structure=FOUR)
        if n:
            border = np.zeros(data.shape, dtype=bool)
            border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
            outside = np.unique(labels[border & inv])
            sizes = np.bincount(labels.ravel())
            fill = (sizes < max_hole_px) & (np.arange(sizes.size) > 0)
            fill[outside] = False
            data[fill[labels]] = True
    return BinaryMask(mask.width, mask.height, mask.downsample, mask.origin, data)


def _pipeline_masks(
    thumb: Thumbnail, p: ImageQcParams
) -> tuple[BinaryMask, BinaryMask, BinaryMask]:
    """(pen, coverslip, tissue), pairwise disjoint: pen wins over coverslip,
    artifacts win over tissue; tissue cleaned of specks and pinholes."""
    pen = detect_pen(thumb, p)
    cover = detect_coverslip_edge(thumb, p).data & ~pen.data
    artifacts = pen.data | cover
    tissue_raw = detect_tissue(thumb, p, exclude=artifacts)
    cleaned = morphological_cleanup(tissue_raw, p.min_object_px, p.max_hole_px)
    return pen, _mask(thumb, cover), _mask(thumb, cleaned.data & ~artifacts)


def tissue_from_thumbnail(
    thumb: Thumbnail, params: ImageQcParams | None = None
) -> BinaryMask:
    """Artifact-excluded, cleaned tissue mask at the thumbnail's grid."""
    return _pipeline_masks(thumb, params or ImageQcParams())[2]


@dataclass
class BlurScore:
    """Per-direction sharpness loss in [0, 1]; 1 means already maximally
    smooth along that direction."""

    horizontal: float  # differences across columns
    vertical: float  # differences across rows

    @property
    def value(self) -> float:
        return max(self.horizontal, self.vertical)


def blur_tile_score(tile: np.ndarray) -> BlurScore:
    """Perceptual blur estimate of one grayscale tile.

    Each direction compares the tile's neighbor differences against those
    of a 9-tap uniform re-blur along that same direction: if re-blurring
    barely changes them, the tile was blurry already.  A direction with no
    variation at all scores 1.0.
    """
    f = np.asarray(tile, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 2:
        raise ValueError("tile must be 2D with both sides >= 2")
    scores = []
    for axis in (1, 0):  # horizontal first: diffs across columns
        b = ndimage.uniform_filter1d(f, size=9, axis=axis, mode="nearest")
        d_f = np.abs(np.diff(f, axis=axis))
        d_b = np.abs(np.diff(b, axis=axis))
        s_f = float(d_f.sum())
        if s_f == 0.0:
            scores.append(1.0)
            continue
        v = np.maximum(0.0, d_f - d_b)
        scores.append((s_f - float(v.sum())) / s_f)
    return BlurScore(horizontal=scores[0], vertical=scores[1])


@dataclass
class BlurTile:
    x: int
    y: int
    size: int
    score: float
    tissue_fraction: float
    counted: bool
    blurry: bool


def blur_map(
    gray: np.ndarray,
    tissue: np.ndarray,
    params: ImageQcParams | None = None,
) -> tuple[list[BlurTile], float]:
    """Tile the image, score sharpness, and report the blurry share.

    Only whole tiles are scored.  A tile joins the denominator when tissue
    covers at least ``tile_tissue_fraction`` of it ("tissue" denominator)
    or always ("slide").  Returns (tiles, blurry_fraction); the fraction is
    0.0 when no tile qualifies.
    """
    p = params or ImageQcParams()
    h, w = gray.shape
    size = p.tile_px
    tiles: list[BlurTile] = []
    counted = blurry_counted = 0
    for y in range(0, h - size + 1, size):
        for x in range(0, w - size + 1, size):
            patch = gray[y : y + size, x : x + size]
            frac = float(tissue[y : y + size, x : x + size].mean())
            score = blur_tile_score(patch).value
            is_blurry = score >= p.tile_blur_threshold
            in_denominator = (
                True if p.blur_denominator == "slide"
                else frac >= p.tile_tissue_fraction
            )
            if in_denominator:
                counted += 1
                if is_blurry:
                    blurry_counted += 1
            tiles.append(
                BlurTile(
                    x=x, y=y, size=size,
                    score=round(score, 6),
                    tissue_fraction=round(frac, 6),
                    counted=in_denominator,
                    blurry=is_blurry,
                )
            )
    fraction = blurry_counted / counted if counted else 0.0
    return tiles, fraction


@dataclass
class ImageQcResult:
    decision: str  # accept | reject
    reason: str | None  # blur | no-tissue
    blurry_fraction: float
    counted_tiles: int
    blurry_tiles: int
    tile_px: int
    tissue: BinaryMask
    pen: BinaryMask
    coverslip: BinaryMask
    tiles: list[BlurTile] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def run_imageqc(
    thumb: Thumbnail,
    params: ImageQcParams | None = None,
    reject_fraction: float | None = None,
) -> ImageQcResult:
    """Full screening pipeline with an accept/reject verdict.

    The three masks come out pairwise disjoint: pen wins over coverslip,
    artifacts win over tissue.  Rejection happens when the blurry share of
    counted tiles strictly exceeds the threshold, or no tissue tile exists.
    """
    p = params or ImageQcParams()
    threshold = p.blur_reject_fraction if reject_fraction is None else reject_fraction
    pen, cover_mask, tissue_mask = _pipeline_masks(thumb, p)
    cover = cover_mask.data
    tissue = tissue_mask.data

    tiles, fraction = blur_map(luminance(thumb.pixels), tissue, p)
    counted = sum(1 for t in tiles if t.counted)
    blurry = sum(1 for t in tiles if t.counted and t.blurry)

    warnings: list[str] = []
    if not tissue.any() or counted == 0:
        decision, reason = "reject", "no-tissue"
        warnings.append("no tissue found on the slide")
        log.warning("no tissue found; rejecting")
    elif fraction > threshold:
        decision, reason = "reject", "blur"
    else:
        decision, reason = "accept", None
    return ImageQcResult(
        decision=decision,
        reason=reason,
        blurry_fraction=fraction,
        counted_tiles=counted,
        blurry_tiles=blurry,
        tile_px=p.tile_px,
        tissue=_mask(thumb, tissue),
        pen=pen,
        coverslip=_mask(thumb, cover),
        tiles=tiles,
        warnings=warnings,
    )


def result_to_doc(result: ImageQcResult) -> dict:
    """JSON-ready result (masks are exported separately as PBM files)."""
    return {
        "decision": result.decision,
        "reason": result.reason,
        "blurry_fraction": round(result.blurry_fraction, 6),
        "counted_tiles": result.counted_tiles,
        "blurry_tiles": result.blurry_tiles,
        "tile_px": result.tile_px,
        "tissue_px": result.tissue.popcount(),
        "pen_px": result.pen.popcount(),
        "coverslip_px": result.coverslip.popcount(),
        "warnings": list(result.warnings),
        "tiles": [
            {
                "x": t.x,
                "y": t.y,
                "size": t.size,
                "score": t.score,
                "tissue_fraction": t.tissue_fraction,
                "counted": t.counted,
                "blurry": t.blurry,
            }
            for t in result.tiles
        ],
    }


def overlay_png(thumb: Thumbnail, result: ImageQcResult) -> Image.Image:
    """Review image: artifacts tinted, non-tissue dimmed, tissue untouched."""
    img = thumb.pixels.astype(np.float64)
    keep = result.tissue.data
    img[~keep] *= 0.45
    img[result.pen.data] = 0.5 * img[result.pen.data] + 0.5 * np.array([255.0, 0, 0])
    img[result.coverslip.data] = (
        0.5 * img[result.coverslip.data] + 0.5 * np.array([0, 0, 255.0])
    )
    return Image.fromarray(img.clip(0, 255).astype(np.uint8))
