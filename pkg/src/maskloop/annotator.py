"""Simulated annotator: box noise, error-region targeting, and click placement.

The simulator inspects the residual between a predicted and a reference mask,
ignores error regions it deems too small, spends a per-round click budget
across the remaining regions (largest first), and jitters click positions
with isotropic Gaussian noise. It answers with clicks or, once nothing is
left to fix, with an explicit zero-clicks accept. It never skips; skipping
is a human-only judgement.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .masks import Box, Mask, Region, _check_mask, _check_same_shape, _sq_dist_to
from .masks import connected_components, region_center

PLACEMENTS = ("region-centre", "region-uniform", "boundary")
ALLOCATIONS = ("proportional-deterministic", "proportional-sampled")


@dataclass(frozen=True)
class Click:
    """One corrective click in continuous canvas coordinates.

    polarity "positive" marks should-be-foreground, "negative" marks
    should-be-background. t_ms is milliseconds since the round was shown
    (0 for simulated clicks).
    """

    x: float
    y: float
    polarity: str
    round: int
    t_ms: int = 0

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"bad polarity: {self.polarity}")
        if self.round < 1:
            raise ValueError("round must be >= 1")

    def to_json(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "polarity": self.polarity,
            "round": self.round,
            "t_ms": self.t_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Click":
        return cls(
            x=float(obj["x"]),
            y=float(obj["y"]),
            polarity=str(obj["polarity"]),
            round=int(obj["round"]),
            t_ms=int(obj.get("t_ms", 0)),
        )


@dataclass(frozen=True)
class AnnotatorModel:
    """Behavior knobs for the simulated annotator."""

    click_sigma: float = 3.0
    min_region_side: float = 0.0
    max_clicks_per_round: int = 3
    placement: str = "region-centre"
    allocation: str = "proportional-deterministic"
    rng_seed: int = 0

    def __post_init__(self):
        if self.click_sigma < 0 or self.min_region_side < 0:
            raise ValueError("sigma and min_region_side must be >= 0")
        if self.max_clicks_per_round < 1:
            raise ValueError("max_clicks_per_round must be >= 1")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement: {self.placement}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"unknown allocation: {self.allocation}")

    def to_json(self) -> dict:
        return {
            "click_sigma": self.click_sigma,
            "min_region_side": self.min_region_side,
            "max_clicks_per_round": self.max_clicks_per_round,
            "placement": self.placement,
            "allocation": self.allocation,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotatorModel":
        return cls(**obj)


@dataclass(frozen=True)
class RoundAnswer:
    """What the annotator returns for one round.

    kind is "clicks", "zero_clicks" or "skip". region_areas holds the area of
    the error region each click targeted (simulation bookkeeping, parallel to
    clicks); None when unknown (human answers).
    """

    kind: str
    clicks: List[Click] = field(default_factory=list)
    region_areas: Optional[List[int]] = None
    duration_ms: int = 0


def draw_box_candidate(gt_box: Box, sigma: float, rng: np.random.Generator):
    """One noisy box proposal: both corners jittered with N(0, sigma) per axis.

    Returns None when the jitter collapses the box below 1px in either
    dimension (the proposal is rejected rather than clamped).
    """
    dx1, dy1, dx2, dy2 = rng.normal(0.0, sigma, size=4) if sigma > 0 else (0.0,) * 4
    x1 = gt_box.x + dx1
    y1 = gt_box.y + dy1
    x2 = gt_box.x2 + dx2
    y2 = gt_box.y2 + dy2
    if x2 - x1 < 1 or y2 - y1 < 1:
        return None
    return Box(x1, y1, x2 - x1, y2 - y1)


def perturb_box(
    gt_box: Box,
    sigma: float,
    min_iou: float,
    rng: np.random.Generator,
    max_attempts: int = 10000,
) -> Box:
    """Rejection-sample a noisy box with IoU >= min_iou against the tight box."""
    if not (0 < min_iou <= 1):
        raise ValueError("min_iou must be in (0, 1]")
    if sigma == 0:
        return gt_box
    for _ in range(max_attempts):
        cand = draw_box_candidate(gt_box, sigma, rng)
        if cand is not None and cand.iou(gt_box) >= min_iou:
            return cand
    raise RuntimeError(
        f"no box with IoU >= {min_iou} after {max_attempts} draws "
        f"(sigma {sigma} too large for a {gt_box.w:.0f}x{gt_box.h:.0f} box)"
    )


def extract_error_regions(pred: Mask, gt: Mask, min_side: float) -> List[Region]:
    """4-connected components of the prediction error, largest first.

    False positives (pred minus gt) and false negatives (gt minus pred) are
    labeled separately; regions with area < min_side^2 are dropped.
    """
    pred, gt = _check_mask(pred), _check_mask(gt)
    _check_same_shape(pred, gt)
    min_area = min_side * min_side
    regions = []
    for polarity, err in (
        ("false_positive", pred & ~gt),
        ("false_negative", gt & ~pred),
    ):
        for r in connected_components(err, connectivity=4):
            if r.area >= min_area:
                regions.append(
                    Region(id=0, area=r.area, bbox=r.bbox, pixels=r.pixels, polarity=polarity)
                )
    first = lambda r: (int(r.pixels[0, 1]), int(r.pixels[0, 0]))
    regions.sort(key=lambda r: (-r.area, first(r)))
    return [
        Region(id=i, area=r.area, bbox=r.bbox, pixels=r.pixels, polarity=r.polarity)
        for i, r in enumerate(regions)
    ]


def allocate_clicks(
    regions: Sequence[Region], budget: int, mode: str, rng: np.random.Generator
) -> List[int]:
    """Split the click budget over regions proportionally to their areas.

    Deterministic mode uses largest-remainder apportionment (regions are
    visited in the given, largest-first order; the largest region always gets
    at least one click). Sampled mode draws each click independently with
    probability proportional to area. Counts are capped at the region area
    and sum to min(budget, total area).
    """
    if not regions:
        raise ValueError("no regions to allocate clicks to")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if mode not in ALLOCATIONS:
        raise ValueError(f"unknown allocation mode: {mode}")
    areas = np.array([r.area for r in regions], dtype=np.float64)
    total = int(areas.sum())
    spend = min(budget, total)
    if mode == "proportional-sampled":
        counts = rng.multinomial(spend, areas / areas.sum()).tolist()
    else:
        quotas = spend * areas / areas.sum()
        counts = np.floor(quotas).astype(int)
        remainders = quotas - counts
        # distribute the leftover by largest remainder, ties by region order
        order = np.lexsort((np.arange(len(regions)), -remainders))
        for i in range(spend - int(counts.sum())):
            counts[order[i % len(order)]] += 1
        counts = counts.tolist()
    # respect per-region capacity, pushing overflow to the next open region
    overflow = 0
    for i, r in enumerate(regions):
        if counts[i] > r.area:
            overflow += counts[i] - r.area
            counts[i] = r.area
    while overflow > 0:
        moved = False
        for i, r in enumerate(regions):
            if overflow == 0:
                break
            if counts[i] < r.area:
                counts[i] += 1
                overflow -= 1
                moved = True
        if not moved:
            break
    return counts


# clockwise Moore neighborhood with y pointing down, starting east
_MOORE = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]


def _trace_boundary(region: Region) -> np.ndarray:
    """Ordered closed walk of the boundary cycle containing the start pixel.

    Moore-neighbor tracing (background-backtrack variant, Jacob's stopping
    criterion) on the region's padded window. Returns (n, 2) (x, y) pixels in
    walk order; pixels may repeat along 1px-wide spurs, which is correct for
    arc length.
    """
    xs, ys = region.pixels[:, 0], region.pixels[:, 1]
    x0, y0 = int(xs.min()), int(ys.min())
    win = np.zeros((int(ys.max()) - y0 + 3, int(xs.max()) - x0 + 3), dtype=bool)
    win[ys - y0 + 1, xs - x0 + 1] = True

    cx, cy = region_center(region)
    on_boundary = _boundary_flags(win)
    by, bx = np.nonzero(on_boundary)
    d = (bx - (cx - x0 + 1)) ** 2 + (by - (cy - y0 + 1)) ** 2
    start = int(np.argmin(d))  # nonzero scans row-major, ties resolve that way
    sy, sx = int(by[start]), int(bx[start])
    if region.area == 1:
        return np.array([[sx + x0 - 1, sy + y0 - 1]], dtype=np.int64)

    # initial backtrack: first background neighbor scanning clockwise from west
    b_dir = None
    for k in range(8):
        dd = (4 + k) % 8
        if not win[sy + _MOORE[dd][1], sx + _MOORE[dd][0]]:
            b_dir = dd
            break
    assert b_dir is not None  # start is a boundary pixel

    walk = [(sx, sy)]
    px, py = sx, sy
    seen = {(sx, sy, b_dir): 0}
    cycle_start = 0
    for _ in range(8 * region.area + 16):
        # scan clockwise starting just after the backtrack pixel
        prev_d = b_dir
        nxt = None
        for k in range(1, 9):
            dd = (b_dir + k) % 8
            nx, ny = px + _MOORE[dd][0], py + _MOORE[dd][1]
            if win[ny, nx]:
                nxt = (nx, ny, dd, prev_d)
                break
            prev_d = dd
        if nxt is None:
            break  # isolated pixel (cannot happen for area > 1 on the cycle)
        nx, ny, dd, last_bg = nxt
        # backtrack from the new pixel points at the last background examined
        bg = (px + _MOORE[last_bg][0], py + _MOORE[last_bg][1])
        delta = (bg[0] - nx, bg[1] - ny)
        b_dir = _MOORE.index(delta)
        px, py = nx, ny
        state = (px, py, b_dir)
        if state in seen:  # the walk is periodic from here
            cycle_start = seen[state]
            break
        seen[state] = len(walk)
        walk.append((px, py))
    cycle = walk[cycle_start:]
    # keep the walk anchored at the start pixel when the period excludes a lead-in
    if (sx, sy) in cycle:
        k = cycle.index((sx, sy))
        cycle = cycle[k:] + cycle[:k]
    return np.array([(x + x0 - 1, y + y0 - 1) for x, y in cycle], dtype=np.int64)


def _boundary_flags(win: np.ndarray) -> np.ndarray:
    interior = win[:-2, 1:-1] & win[2:, 1:-1] & win[1:-1, :-2] & win[1:-1, 2:]
    out = win.copy()
    out[1:-1, 1:-1] = win[1:-1, 1:-1] & ~interior
    return out


def place_clicks(
    region: Region,
    n: int,
    placement: str,
    sigma: float,
    rng: np.random.Generator,
    round_index: int,
    canvas_w: int,
    canvas_h: int,
) -> List[Click]:
    """Pick n click positions in/around the region and jitter them.

    region-centre starts at the pole of inaccessibility and continues with
    farthest-point sampling; region-uniform draws pixels uniformly; boundary
    spaces points at equal arc length along the boundary walk, starting at
    the boundary pixel nearest the center. Noise is never re-clamped into
    the region (a noisy click may miss), only into the canvas.
    """
    if n < 1 or region.area < 1:
        raise ValueError("need n >= 1 and a non-empty region")
    polarity = "positive" if region.polarity == "false_negative" else "negative"
    pts: List[tuple] = []
    if placement == "region-uniform":
        idx = rng.integers(0, region.area, size=n)
        pts = [(float(region.pixels[i, 0]), float(region.pixels[i, 1])) for i in idx]
    elif placement == "region-centre":
        pts = [region_center(region)]
        if n > 1:
            xs = region.pixels[:, 0].astype(np.float64)
            ys = region.pixels[:, 1].astype(np.float64)
            x0, y0 = int(xs.min()), int(ys.min())
            win = np.zeros((int(ys.max()) - y0 + 3, int(xs.max()) - x0 + 3), dtype=bool)
            win[region.pixels[:, 1] - y0 + 1, region.pixels[:, 0] - x0 + 1] = True
            interior = np.sqrt(
                _sq_dist_to(~win)[region.pixels[:, 1] - y0 + 1, region.pixels[:, 0] - x0 + 1]
            )
            for _ in range(n - 1):
                d_clicks = np.full(region.area, np.inf)
                for qx, qy in pts:
                    d = np.hypot(xs - qx, ys - qy)
                    np.minimum(d_clicks, d, out=d_clicks)
                score = np.minimum(d_clicks, interior)
                best = int(np.argmax(score))
                pts.append((float(xs[best]), float(ys[best])))
    else:  # boundary
        cycle = _trace_boundary(region)
        if len(cycle) == 1:
            pts = [(float(cycle[0, 0]), float(cycle[0, 1]))] * n
        else:
            seg = np.hypot(*(np.diff(np.vstack([cycle, cycle[:1]]), axis=0).T))
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            total = cum[-1]
            for i in range(n):
                target = total * i / n
                k = int(np.searchsorted(cum, target, side="right") - 1)
                k = min(k, len(cycle) - 1)
                pts.append((float(cycle[k, 0]), float(cycle[k, 1])))

    clicks = []
    for px, py in pts:
        # pixel (px, py) has its center at +0.5
        x, y = px + 0.5, py + 0.5
        if sigma > 0:
            x += rng.normal(0.0, sigma)
            y += rng.normal(0.0, sigma)
        x = min(max(x, 0.0), canvas_w - 1e-6)
        y = min(max(y, 0.0), canvas_h - 1e-6)
        clicks.append(Click(x=x, y=y, polarity=polarity, round=round_index))
    return clicks


def simulate_round(
    pred: Mask,
    gt: Mask,
    model: AnnotatorModel,
    round_index: int,
    rng: np.random.Generator,
) -> RoundAnswer:
    """One simulated inspection: zero-clicks when nothing actionable remains."""
    pred, gt = _check_mask(pred), _check_mask(gt)
    _check_same_shape(pred, gt)
    regions = extract_error_regions(pred, gt, model.min_region_side)
    if not regions:
        return RoundAnswer(kind="zero_clicks", clicks=[], region_areas=[])
    counts = allocate_clicks(regions, model.max_clicks_per_round, model.allocation, rng)
    h, w = pred.shape
    clicks: List[Click] = []
    areas: List[int] = []
    for region, k in zip(regions, counts):
        if k == 0:
            continue
        clicks.extend(
            place_clicks(
                region, k, model.placement, model.click_sigma, rng, round_index, w, h
            )
        )
        areas.extend([region.area] * k)
    return RoundAnswer(kind="clicks", clicks=clicks, region_areas=areas)
