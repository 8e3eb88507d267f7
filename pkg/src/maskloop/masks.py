"""Binary instance masks: value types, RLE codec, and segmentation metrics.

A mask is a boolean numpy array of shape (h, w), row-major, True = foreground.
All metric functions are pure and raise ValueError on dimension mismatches.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

Mask = np.ndarray  # bool array, shape (h, w)

_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_CONN8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel units. May overhang the image."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def iou(self, other: "Box") -> float:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class Region:
    """One connected component of true pixels.

    pixels is an (n, 2) int array of (x, y) coordinates in row-major scan
    order. polarity marks error regions ("false_positive"/"false_negative")
    and is None for plain components.
    """

    id: int
    area: int
    bbox: Box
    pixels: np.ndarray
    polarity: Optional[str] = None


@dataclass(frozen=True)
class RleMask:
    """Run-length coded mask over the row-major scan, starting with zeros."""

    width: int
    height: int
    counts: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("RLE dimensions must be positive")

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(int(obj["w"]), int(obj["h"]), tuple(int(c) for c in obj["counts"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def _check_mask(m: Mask) -> Mask:
    m = np.asarray(m)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"mask must be a non-empty 2-d array, got shape {m.shape}")
    return m.astype(bool, copy=False)


def _check_same_shape(a: Mask, b: Mask):
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def iou(a: Mask, b: Mask) -> float:
    """Intersection-over-union. Two empty masks compare as identical (1.0)."""
    a, b = _check_mask(a), _check_mask(b)
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def boundary_mask(m: Mask) -> Mask:
    """True pixels with at least one false 4-neighbor (border counts as false)."""
    m = _check_mask(m)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior

def _sq_dist_to(points: Mask) -> np.ndarray:
    """Per-pixel squared Euclidean distance to the nearest true pixel (exact ints)."""
    iy, ix = ndimage.distance_transform_edt(
        ~points, return_distances=False, return_indices=True
    )
    yy, xx = np.indices(points.shape)
    dy = yy - iy
    dx = xx - ix
    return dy * dy + dx * dx


def boundary_f(pred: Mask, gt: Mask, tol: float) -> float:
    """Boundary F-measure: precision/recall of boundary pixels within tol px.

    Conventions: both boundaries empty -> 1.0 (two empty masks),
    exactly one empty -> 0.0, otherwise F = 2PR/(P+R) with F = 0 at P+R = 0.
    """
    pred, gt = _check_mask(pred), _check_mask(gt)
    _check_same_shape(pred, gt)
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    pb = boundary_mask(pred)
    gb = boundary_mask(gt)
    n_p = np.count_nonzero(pb)
    n_g = np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    tol_sq = float(tol) * float(tol)
    precision = np.count_nonzero(_sq_dist_to(gb)[pb] <= tol_sq) / n_p
    recall = np.count_nonzero(_sq_dist_to(pb)[gb] <= tol_sq) / n_g
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def connected_components(m: Mask, connectivity: int = 4) -> list:
    """Split true pixels into maximal connected regions.

    Ordered by decreasing area; ties by the smallest (y, x) first pixel in
    row-major order. Region pixels are stored in row-major order.
    """
    m = _check_mask(m)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = _CONN4 if connectivity == 4 else _CONN8
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return []
    raw = []
    for i, sl in enumerate(ndimage.find_objects(labels)):
        ys, xs = np.nonzero(labels[sl] == i + 1)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        pixels = np.column_stack([xs, ys]).astype(np.int64)
        raw.append((len(xs), int(ys[0]), int(xs[0]), pixels))
    raw.sort(key=lambda r: (-r[0], r[1], r[2]))
    regions = []
    for rid, (area, _, _, pixels) in enumerate(raw):
        x0, y0 = pixels[:, 0].min(), pixels[:, 1].min()
        x1, y1 = pixels[:, 0].max(), pixels[:, 1].max()
        bbox = Box(float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))
        regions.append(Region(id=rid, area=area, bbox=bbox, pixels=pixels))
    return regions


def distance_transform(m: Mask) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest true pixel."""
    m = _check_mask(m)
    if not m.any():
        raise ValueError("undefined distance field: mask has no true pixel")
    return ndimage.distance_transform_edt(~m)


def rle_encode(m: Mask) -> RleMask:
    """Encode over the row-major scan; counts start with the run of zeros."""
    m = _check_mask(m)
    h, w = m.shape
    flat = m.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask(width=w, height=h, counts=tuple(int(c) for c in counts))


def rle_decode(r: RleMask) -> Mask:
    """Inverse of rle_encode. Raises ValueError on malformed counts."""
    counts = np.asarray(r.counts, dtype=np.int64)
    if counts.size == 0:
        raise ValueError("RLE counts must be non-empty")
    if (counts < 0).any():
        raise ValueError("RLE counts must be non-negative")
    if (counts[1:] == 0).any():
        raise ValueError("RLE has an interior zero count")
    if counts.sum() != r.width * r.height:
        raise ValueError(
            f"RLE counts sum {counts.sum()} != {r.width}x{r.height}"
        )
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape(r.height, r.width)


def region_center(r: Region) -> tuple:
    """The region pixel farthest from its complement (pole of inaccessibility).

    Ties break in row-major order (smallest y, then x). Works on the region's
    padded bounding window; pixels beyond the window are complement.
    """
    if r.area < 1:
        raise ValueError("region must have at least one pixel")
    xs, ys = r.pixels[:, 0], r.pixels[:, 1]
    x0, y0 = xs.min(), ys.min()
    win = np.zeros((ys.max() - y0 + 3, xs.max() - x0 + 3), dtype=bool)
    win[ys - y0 + 1, xs - x0 + 1] = True
    sq = _sq_dist_to(~win)
    depth = sq[ys - y0 + 1, xs - x0 + 1]
    best = int(np.argmax(depth))  # pixels are row-major, argmax takes the first
    return int(xs[best]), int(ys[best])


def write_mask_png(m: Mask, path) -> None:
    """Export as 8-bit single-channel image, 0 = background, 255 = foreground."""
    m = _check_mask(m)
    Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128
