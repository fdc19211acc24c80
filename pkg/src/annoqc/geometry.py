"""Geometric primitives shared by the QC metrics.

Coordinates are in base-resolution pixels (level 0 of the slide pyramid),
x growing right and y growing down.  Rasters are bit-per-pixel grids whose
cell (i, j) covers the base-pixel square
``[origin + j*ds, origin + (j+1)*ds) x [origin + i*ds, origin + (i+1)*ds)``
and is set when the cell *center* lies inside the shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (x0, y0, x1, y1) in base px, half-open on the high edges
Window = tuple[float, float, float, float]


def polygon_area(vertices) -> float:
    """Absolute shoelace area in base px^2, independent of orientation."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    x, y = v[:, 0], v[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def area_to_mm2(area_px2: float, mpp: float) -> float:
    """Convert an area in base px^2 to mm^2 for a given microns-per-pixel."""
    if mpp <= 0:
        raise ValueError("mpp must be positive")
    return area_px2 * mpp * mpp / 1e6


def rectangle_window(rect) -> Window:
    """Normalize a 2- or 4-corner rectangle into an (x0, y0, x1, y1) window."""
    v = np.asarray(rect, dtype=float).reshape(-1, 2)
    return (
        float(v[:, 0].min()),
        float(v[:, 1].min()),
        float(v[:, 0].max()),
        float(v[:, 1].max()),
    )


@dataclass
class BinaryMask:
    """Boolean raster anchored at ``origin`` (base px) with square cells of
    ``downsample`` base px per side."""

    width: int
    height: int
    downsample: float
    origin: tuple[float, float]
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 0 or self.height < 0:
            raise ValueError("mask dimensions must be non-negative")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.shape != (self.height, self.width):
            raise ValueError(
                f"data shape {self.data.shape} != (height, width) "
                f"({self.height}, {self.width})"
            )

    @classmethod
    def filled(
        cls,
        window: Window,
        downsample: float,
        value: bool = False,
    ) -> "BinaryMask":
        w, h = _grid_shape(window, downsample)
        data = np.full((h, w), bool(value), dtype=bool)
        return cls(w, h, downsample, (window[0], window[1]), data)

    def same_grid(self, other: "BinaryMask") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.downsample == other.downsample
            and self.origin == other.origin
        )

    def popcount(self) -> int:
        return int(self.data.sum())

    def area_px2(self) -> float:
        """Covered area in base px^2 (cells times cell area)."""
        return self.popcount() * self.downsample * self.downsample

    def to_pbm(self) -> bytes:
        """Serialize as binary PBM (P4), rows padded to whole bytes."""
        header = f"P4\n{self.width} {self.height}\n".encode("ascii")
        if self.width == 0 or self.height == 0:
            return header
        packed = np.packbits(self.data, axis=1)
        return header + packed.tobytes()

    @classmethod
    def from_pbm(
        cls,
        blob: bytes,
        downsample: float = 1.0,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "BinaryMask":
        if not blob.startswith(b"P4"):
            raise ValueError("not a binary PBM (P4) payload")
        # header: magic, whitespace-separated width/height, one whitespace, bits
        pos = 2
        fields = []
        while len(fields) < 2:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            fields.append(int(blob[start:pos]))
        pos += 1
        w, h = fields
        if w == 0 or h == 0:
            return cls(w, h, downsample, origin, np.zeros((h, w), dtype=bool))
        row_bytes = (w + 7) // 8
        raw = np.frombuffer(blob, dtype=np.uint8, count=h * row_bytes, offset=pos)
        bits = np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w]
        return cls(w, h, downsample, origin, bits.astype(bool))

    def to_rle(self) -> str:
        """Row-major run-length text: 'w h first_value run run ...'."""
        flat = self.data.ravel()
        if flat.size == 0:
            return f"{self.width} {self.height} 0"
        first = int(flat[0])
        edges = np.flatnonzero(np.diff(flat.view(np.int8)))
        bounds = np.concatenate([[-1], edges, [flat.size - 1]])
        runs = np.diff(bounds)
        return f"{self.width} {self.height} {first} " + " ".join(map(str, runs))

    @classmethod
    def from_rle(
        cls,
        text: str,
        downsample: float = 1.0,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "BinaryMask":
        parts = text.split()
        w, h, first = int(parts[0]), int(parts[1]), int(parts[2])
        runs = np.array([int(p) for p in parts[3:]], dtype=np.int64)
        flat = np.zeros(w * h, dtype=bool)
        if runs.size:
            if int(runs.sum()) != w * h:
                raise ValueError("run lengths do not cover the raster")
            stops = np.cumsum(runs)
            starts = np.concatenate([[0], stops[:-1]])
            value = bool(first)
            for s, e in zip(starts, stops):
                flat[s:e] = value
                value = not value
        elif w * h:
            raise ValueError("missing run lengths")
        return cls(w, h, downsample, origin, flat.reshape(h, w))


def _grid_shape(window: Window, downsample: float) -> tuple[int, int]:
    x0, y0, x1, y1 = window
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"empty window {window}")
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    w = int(np.ceil((x1 - x0) / downsample))
    h = int(np.ceil((y1 - y0) / downsample))
    return w, h


def _axis_aligned_rect(verts: np.ndarray):
    """Return (xmin, ymin, xmax, ymax) when verts trace an axis-aligned
    rectangle, else None."""
    if verts.shape[0] != 4:
        return None
    xs = np.unique(verts[:, 0])
    ys = np.unique(verts[:, 1])
    if xs.size != 2 or ys.size != 2:
        return None
    nxt = np.roll(verts, -1, axis=0)
    horizontal = verts[:, 1] == nxt[:, 1]
    vertical = verts[:, 0] == nxt[:, 0]
    if not np.all(horizontal ^ vertical):
        return None
    return float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1])


def _signed_loop_sum(verts: np.ndarray) -> float:
    """Signed shoelace sum; its sign is the ring's winding direction."""
    x, y = verts[:, 0], verts[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def oriented(vertices) -> np.ndarray:
    """Copy of a ring rewound to positive (winding +1) direction.

    Normalizing independent annotations this way makes one nonzero-rule
    rasterize call of all of them equal their union (windings add, never
    cancel).
    """
    v = np.asarray(vertices, dtype=float)
    if _signed_loop_sum(v) < 0:
        return v[::-1].copy()
    return v


def _scan_ring(acc: np.ndarray, verts: np.ndarray, signed: bool) -> None:
    """Accumulate a ring's contribution per cell center (mask coords):
    signed winding counts, or raw crossing counts for the even-odd rule.

    Crossing convention is half-open (an edge spans v1 <= y < v2), so shared
    edges and vertices are counted once and rectangles cover exactly
    [xmin, xmax) x [ymin, ymax) over cell centers.
    """
    h, w = acc.shape
    rect = _axis_aligned_rect(verts)
    if rect is not None:
        xmin, ymin, xmax, ymax = rect
        j0 = max(0, int(np.ceil(xmin - 0.5)))
        j1 = min(w, int(np.ceil(xmax - 0.5)))
        i0 = max(0, int(np.ceil(ymin - 0.5)))
        i1 = min(h, int(np.ceil(ymax - 0.5)))
        if j0 < j1 and i0 < i1:
            step = (1 if _signed_loop_sum(verts) > 0 else -1) if signed else 1
            acc[i0:i1, j0:j1] += step
        return

    v1 = verts
    v2 = np.roll(verts, -1, axis=0)
    i0 = max(0, int(np.ceil(verts[:, 1].min() - 0.5)))
    i1 = min(h - 1, int(np.floor(verts[:, 1].max() - 0.5)))
    for i in range(i0, i1 + 1):
        yc = i + 0.5
        up = (v1[:, 1] <= yc) & (v2[:, 1] > yc)
        dn = (v2[:, 1] <= yc) & (v1[:, 1] > yc)
        hit = up | dn
        if not hit.any():
            continue
        a, b = v1[hit], v2[hit]
        t = (yc - a[:, 1]) / (b[:, 1] - a[:, 1])
        xi = a[:, 0] + t * (b[:, 0] - a[:, 0])
        order = np.argsort(xi, kind="stable")
        xi = xi[order]
        j0 = max(0, int(np.ceil(xi[0] - 0.5)))
        j1 = min(w - 1, int(np.floor(xi[-1] - 0.5)))
        if j0 > j1:
            continue
        centers = np.arange(j0, j1 + 1) + 0.5
        pos = np.searchsorted(xi, centers, side="right")
        if signed:
            dirs = np.where(up[hit], 1, -1)[order]
            suffix = np.concatenate([np.cumsum(dirs[::-1])[::-1], [0]])
            acc[i, j0 : j1 + 1] += suffix[pos]
        else:
            acc[i, j0 : j1 + 1] += xi.size - pos


def rasterize(
    polygons,
    window: Window,
    downsample: float,
    fill_rule: str = "nonzero",
) -> BinaryMask:
    """Rasterize polygon rings (base-px vertex lists) onto a window.

    The rings jointly describe one shape: winding numbers accumulate across
    them, and a cell is set when its center is covered under ``fill_rule``
    ("nonzero" default, "evenodd" optional).  Opposite-wound rings therefore
    cut holes under the nonzero rule; pass rings through ``oriented`` first
    to get plain unions instead.  Shapes are clipped to the window.
    """
    if fill_rule not in ("nonzero", "evenodd"):
        raise ValueError(f"unknown fill rule {fill_rule!r}")
    w, h = _grid_shape(window, downsample)
    x0, y0 = window[0], window[1]
    acc = np.zeros((h, w), dtype=np.int32)
    signed = fill_rule == "nonzero"
    for poly in polygons:
        v = np.asarray(poly, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("polygon must be a sequence of (x, y) pairs")
        if v.shape[0] >= 2 and np.array_equal(v[0], v[-1]):
            v = v[:-1]  # drop explicit closing vertex
        if v.shape[0] < 3:
            continue  # degenerate, covers no cell centers
        mv = np.empty_like(v)
        mv[:, 0] = (v[:, 0] - x0) / downsample
        mv[:, 1] = (v[:, 1] - y0) / downsample
        _scan_ring(acc, mv, signed)
    data = (acc != 0) if signed else (acc % 2 == 1)
    return BinaryMask(w, h, downsample, (x0, y0), data)


def mask_jaccard(a: BinaryMask, b: BinaryMask) -> float:
    """Pixelwise Jaccard overlap (intersection over union of set cells).

    Two empty masks agree perfectly: 1.0 by convention.
    """
    if not a.same_grid(b):
        raise ValueError("masks live on different grids")
    union = int(np.logical_or(a.data, b.data).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return inter / union


def jaccard_to_dice(j: float) -> float:
    """Dice coefficient from a Jaccard value (monotone bijection on [0, 1])."""
    if not 0.0 <= j <= 1.0:
        raise ValueError("jaccard must lie in [0, 1]")
    return 2.0 * j / (1.0 + j)


def sample_mask(mask: BinaryMask, window: Window, downsample: float) -> BinaryMask:
    """Resample ``mask`` onto a new window/downsample grid.

    Each output cell takes the value of the source cell containing its
    center; centers outside the source raster read False.
    """
    w, h = _grid_shape(window, downsample)
    cx = window[0] + (np.arange(w) + 0.5) * downsample
    cy = window[1] + (np.arange(h) + 0.5) * downsample
    col = np.floor((cx - mask.origin[0]) / mask.downsample).astype(np.int64)
    row = np.floor((cy - mask.origin[1]) / mask.downsample).astype(np.int64)
    okc = (col >= 0) & (col < mask.width)
    okr = (row >= 0) & (row < mask.height)
    data = np.zeros((h, w), dtype=bool)
    if okc.any() and okr.any():
        sub = mask.data[np.ix_(row[okr], col[okc])]
        data[np.ix_(okr, okc)] = sub
    return BinaryMask(w, h, downsample, (window[0], window[1]), data)


class GridIndex:
    """Uniform bucket index over 2D items for coarse range queries.

    Query results are a superset of the true hits (no false negatives);
    callers do their own exact filtering.
    """

    def __init__(self, bucket_size: float):
        if bucket_size <= 0:
            raise ValueError("bucket size must be positive")
        self.bucket_size = float(bucket_size)
        self._buckets: dict[tuple[int, int], list] = {}
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def _cell_range(self, bbox) -> tuple[int, int, int, int]:
        x0, y0, x1, y1 = bbox
        if x1 < x0 or y1 < y0:
            raise ValueError(f"invalid bbox {bbox}")
        s = self.bucket_size
        return (
            int(np.floor(x0 / s)),
            int(np.floor(y0 / s)),
            int(np.floor(x1 / s)),
            int(np.floor(y1 / s)),
        )

    def insert(self, item_id, bbox) -> None:
        """Register an item under every bucket its bbox touches."""
        cx0, cy0, cx1, cy1 = self._cell_range(bbox)
        for cy in range(cy0, cy1 + 1):
            for cx in range(cx0, cx1 + 1):
                self._buckets.setdefault((cx, cy), []).append(item_id)
        self._count += 1

    def insert_point(self, item_id, x: float, y: float) -> None:
        self.insert(item_id, (x, y, x, y))

    def query(self, window) -> list:
        """Item ids whose bbox may intersect the window, in first-insertion
        order, each id once."""
        cx0, cy0, cx1, cy1 = self._cell_range(window)
        seen = dict()
        for cy in range(cy0, cy1 + 1):
            for cx in range(cx0, cx1 + 1):
                for item in self._buckets.get((cx, cy), ()):
                    seen[item] = None
        return list(seen)
