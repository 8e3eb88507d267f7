"""Mask refiners: the pluggable models that turn boxes and clicks into masks.

Four kinds share one interface:
  - healing-oracle: ground-truth-backed test refiner. Round 0 emits a
    deterministically corrupted copy of the reference mask; afterwards every
    click repairs the whole error component it lands in. Only constructible
    when ground truth exists; never in the live campaign path.
  - box-prior: classical color-model segmentation from the box alone
    (the zero-click role).
  - geodesic-click: shortest-path competition between click/mask seeds and
    background seeds over a color-difference grid (the with-clicks role).
  - remote: defers to an external model over HTTP.

All refiners are deterministic functions of their request (remote excluded).
"""

import base64
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import requests
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .annotator import Click
from .geometry import ClickEncoding, CropTransform, InputStack, rasterize_clicks, stack_to_bytes
from .masks import Mask, RleMask, _CONN4, rle_decode
from .seeding import rng_stream

REFINER_KINDS = ("healing-oracle", "box-prior", "geodesic-click", "remote")

#: default round-0 refiner when the configured kind only handles clicks
INITIAL_FOR = {
    "healing-oracle": "healing-oracle",
    "box-prior": "box-prior",
    "geodesic-click": "box-prior",
    "remote": "remote",
}


class RefineError(Exception):
    """Base class for refiner failures."""


class RemoteTransportError(RefineError):
    """Connection-level failure talking to a remote refiner."""


class RemoteTimeoutError(RefineError):
    """The remote refiner did not answer in time."""


class RemoteProtocolError(RefineError):
    """The remote refiner answered with something unusable."""


@dataclass
class RefineRequest:
    """Everything a refiner may need, all in canvas space."""

    instance_id: str
    round: int
    clicks: List[Click]
    prev_mask: Optional[Mask]
    transform: CropTransform
    box_channel: np.ndarray
    crop_rgb: Optional[np.ndarray] = None

    def __post_init__(self):
        outer = self.transform.outer
        if self.box_channel.shape != (outer, outer):
            raise ValueError("box channel does not match the canvas")
        if self.prev_mask is not None and self.prev_mask.shape != (outer, outer):
            raise ValueError("previous mask does not match the canvas")
        if any(c.round > self.round for c in self.clicks):
            raise ValueError("clicks from future rounds in request")

    def new_clicks(self) -> List[Click]:
        return [c for c in self.clicks if c.round == self.round]


def _click_pixel(c: Click, shape) -> Tuple[int, int]:
    h, w = shape
    return min(max(int(c.y), 0), h - 1), min(max(int(c.x), 0), w - 1)


# ---------------------------------------------------------------------------
# healing oracle


@dataclass(frozen=True)
class CorruptionBand:
    """One size class of injected error blobs (disc radius range, count range)."""

    count: Tuple[int, int]
    radius: Tuple[float, float]


#: bands sized for the 128px canvas: tiny/small stay under a 20^2 area
#: threshold, medium sits between 20^2 and 30^2, large above 30^2
DEFAULT_BANDS = (
    CorruptionBand(count=(2, 5), radius=(2.0, 4.0)),
    CorruptionBand(count=(2, 4), radius=(6.0, 9.0)),
    CorruptionBand(count=(2, 4), radius=(12.0, 16.0)),
    CorruptionBand(count=(1, 2), radius=(18.0, 22.0)),
)


@dataclass(frozen=True)
class CorruptionConfig:
    bands: Tuple[CorruptionBand, ...] = DEFAULT_BANDS
    fn_fraction: float = 0.5
    severity: Tuple[float, float] = (1.0, 1.0)

    def to_json(self) -> dict:
        return {
            "bands": [{"count": list(b.count), "radius": list(b.radius)} for b in self.bands],
            "fn_fraction": self.fn_fraction,
            "severity": list(self.severity),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionConfig":
        bands = tuple(
            CorruptionBand(count=tuple(b["count"]), radius=tuple(b["radius"]))
            for b in obj.get("bands", [])
        ) or DEFAULT_BANDS
        return cls(
            bands=bands,
            fn_fraction=float(obj.get("fn_fraction", 0.5)),
            severity=tuple(obj.get("severity", (1.0, 1.0))),
        )


def corrupt_mask(gt: Mask, rng: np.random.Generator, cfg: CorruptionConfig = CorruptionConfig()) -> Mask:
    """Inject disjoint disc-shaped errors (holes and blobs) into a copy of gt.

    Blobs avoid touching each other and the mask boundary so each one stays
    its own error component.
    """
    h, w = gt.shape
    out = gt.copy()
    err = np.zeros_like(gt)
    depth_in = ndimage.distance_transform_edt(gt)
    depth_out = ndimage.distance_transform_edt(~gt)
    severity = rng.uniform(*cfg.severity)
    yy, xx = np.indices((h, w))
    # big discs claim space first; small ones fill the gaps
    for band in sorted(cfg.bands, key=lambda b: -b.radius[1]):
        n = int(round(int(rng.integers(band.count[0], band.count[1] + 1)) * severity))
        for _ in range(n):
            r = float(rng.uniform(*band.radius))
            make_hole = bool(rng.random() < cfg.fn_fraction)
            for _attempt in range(40):
                cx = float(rng.uniform(r + 2, w - r - 2))
                cy = float(rng.uniform(r + 2, h - r - 2))
                py, px = int(cy), int(cx)
                depth = depth_in[py, px] if make_hole else depth_out[py, px]
                if depth < r + 2:
                    continue
                y0, y1 = int(cy - r - 2), int(cy + r + 3)
                x0, x1 = int(cx - r - 2), int(cx + r + 3)
                local = (xx[y0:y1, x0:x1] + 0.5 - cx) ** 2 + (yy[y0:y1, x0:x1] + 0.5 - cy) ** 2
                disc = local <= r * r
                guard = local <= (r + 2) ** 2
                if (err[y0:y1, x0:x1] & guard).any():
                    continue
                out[y0:y1, x0:x1] ^= disc
                err[y0:y1, x0:x1] |= disc
                break
    return out


def heal_mask(gt: Mask, prev: Mask, clicks: Sequence[Click]) -> Mask:
    """Repair, for each click in order, the whole error component it lands in."""
    if prev.shape != gt.shape:
        raise ValueError("mask dimensions differ")
    labels, n = ndimage.label(prev ^ gt, structure=_CONN4)
    out = prev.copy()
    healed = set()
    for c in clicks:
        py, px = _click_pixel(c, gt.shape)
        lab = int(labels[py, px])
        if lab and lab not in healed:
            comp = labels == lab
            out[comp] = gt[comp]
            healed.add(lab)
    return out


class HealingOracleRefiner:
    """Ground-truth repair stand-in; gt must be supplied in canvas space."""

    kind = "healing-oracle"

    def __init__(self, gt_canvas: Mask, corruption: CorruptionConfig = CorruptionConfig(), seed: int = 0):
        self.gt = np.asarray(gt_canvas, dtype=bool)
        self.corruption = corruption
        self.seed = seed

    def refine(self, req: RefineRequest) -> Mask:
        if req.prev_mask is None:
            rng = rng_stream(self.seed, req.instance_id, "corrupt")
            return corrupt_mask(self.gt, rng, self.corruption)
        return heal_mask(self.gt, req.prev_mask, req.new_clicks())


# ---------------------------------------------------------------------------
# box prior


def _majority_smooth(fg: Mask) -> Mask:
    counts = ndimage.convolve(fg.astype(np.float64), np.ones((3, 3)), mode="constant")
    return counts >= 4.5


def box_prior_segment(rgb: np.ndarray, box_channel: np.ndarray, iterations: int = 5, bins: int = 8) -> Mask:
    """Iterative histogram likelihood-ratio segmentation inside the box.

    Foreground is seeded by the centered half-size rectangle (25% of the box
    area); the background model comes from pixels outside the box and stays
    fixed. Keeps the component containing the box center (or the largest one)
    and always returns a non-empty mask.
    """
    box = np.asarray(box_channel) > 0.5
    if not box.any():
        raise ValueError("box channel is empty on the canvas")
    ys, xs = np.nonzero(box)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    seed = np.zeros_like(box)
    seed[y0 + bh // 4 : y0 + bh - bh // 4, x0 + bw // 4 : x0 + bw - bw // 4] = True
    seed &= box

    quant = np.clip((np.asarray(rgb) * bins).astype(np.int64), 0, bins - 1)
    idx = (quant[..., 0] * bins + quant[..., 1]) * bins + quant[..., 2]
    n_bins = bins**3
    bg_hist = np.bincount(idx[~box].ravel(), minlength=n_bins).astype(np.float64)
    p_bg = (bg_hist + 1.0) / (bg_hist.sum() + n_bins)

    fg = seed.copy()
    for _ in range(iterations):
        if not fg.any():
            fg = seed.copy()
        fg_hist = np.bincount(idx[fg].ravel(), minlength=n_bins).astype(np.float64)
        p_fg = (fg_hist + 1.0) / (fg_hist.sum() + n_bins)
        fg = (p_fg[idx] >= p_bg[idx]) & box
        fg = _majority_smooth(fg) & box

    labels, n = ndimage.label(fg, structure=_CONN4)
    if n == 0:
        return seed
    ccx = int((x0 + x1) // 2)
    ccy = int((y0 + y1) // 2)
    lab = int(labels[ccy, ccx])
    if lab == 0:
        areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        lab = int(np.argmax(areas)) + 1
    return labels == lab


class BoxPriorRefiner:
    kind = "box-prior"

    def __init__(self, iterations: int = 5, bins: int = 8):
        self.iterations = iterations
        self.bins = bins

    def refine(self, req: RefineRequest) -> Mask:
        if req.crop_rgb is None:
            raise ValueError("box-prior refiner needs the crop image")
        return box_prior_segment(req.crop_rgb, req.box_channel, self.iterations, self.bins)


# ---------------------------------------------------------------------------
# geodesic clicks


def _grid_graph(rgb: np.ndarray, epsilon: float) -> csr_matrix:
    h, w = rgb.shape[:2]
    n = h * w
    idx = np.arange(n).reshape(h, w)
    dh = np.sqrt(((rgb[:, 1:] - rgb[:, :-1]) ** 2).sum(axis=-1)).ravel() + epsilon
    dv = np.sqrt(((rgb[1:, :] - rgb[:-1, :]) ** 2).sum(axis=-1)).ravel() + epsilon
    us = np.concatenate([idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()])
    vs = np.concatenate([idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()])
    ws = np.concatenate([dh, dh, dv, dv])
    return csr_matrix((ws, (us, vs)), shape=(n, n))


def _min_dist(graph: csr_matrix, sources: np.ndarray, n: int) -> np.ndarray:
    if sources.size == 0:
        return np.full(n, np.inf)
    return dijkstra(graph, directed=True, indices=sources, min_only=True)


def geodesic_click_segment(
    rgb: np.ndarray,
    box_channel: np.ndarray,
    clicks: Sequence[Click],
    prev_mask: Optional[Mask],
    epsilon: float = 0.01,
    core_erosion: float = 5.0,
    bg_band_margin: float = 8.0,
) -> Mask:
    """Label every pixel by its nearer seed set under color-path distance.

    Foreground seeds: positive clicks plus the eroded core of the previous
    mask. Background seeds: negative clicks, the band beyond the box margin,
    and the canvas border. Click pixels are hard constraints.
    """
    h, w = rgb.shape[:2]
    box = np.asarray(box_channel) > 0.5

    fg_seed = np.zeros((h, w), dtype=bool)
    bg_seed = np.zeros((h, w), dtype=bool)
    pos_pix, neg_pix = [], []
    for c in clicks:
        py, px = _click_pixel(c, (h, w))
        (pos_pix if c.polarity == "positive" else neg_pix).append((py, px))
    for py, px in pos_pix:
        fg_seed[py, px] = True
    for py, px in neg_pix:
        bg_seed[py, px] = True

    if prev_mask is not None and prev_mask.any():
        core = ndimage.distance_transform_edt(prev_mask) > core_erosion
        fg_seed |= core

    if box.any():
        ys, xs = np.nonzero(box)
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        yy, xx = np.indices((h, w))
        out_x = np.maximum(x0 - xx, xx - x1)
        out_y = np.maximum(y0 - yy, yy - y1)
        bg_seed |= np.maximum(out_x, out_y) >= bg_band_margin
    bg_seed[0, :] = bg_seed[-1, :] = bg_seed[:, 0] = bg_seed[:, -1] = True
    bg_seed &= ~fg_seed

    if not fg_seed.any() and not bg_seed.any():
        raise ValueError("both seed sets are empty")

    graph = _grid_graph(np.asarray(rgb, dtype=np.float64), epsilon)
    n = h * w
    d_fg = _min_dist(graph, np.flatnonzero(fg_seed.ravel()), n)
    d_bg = _min_dist(graph, np.flatnonzero(bg_seed.ravel()), n)
    out = (d_fg <= d_bg).reshape(h, w)
    for py, px in pos_pix:
        out[py, px] = True
    for py, px in neg_pix:
        out[py, px] = False
    return out


class GeodesicClickRefiner:
    kind = "geodesic-click"

    def __init__(self, epsilon: float = 0.01, core_erosion: float = 5.0, bg_band_margin: float = 8.0):
        self.epsilon = epsilon
        self.core_erosion = core_erosion
        self.bg_band_margin = bg_band_margin

    def refine(self, req: RefineRequest) -> Mask:
        if req.crop_rgb is None:
            raise ValueError("geodesic refiner needs the crop image")
        if not req.clicks and (req.prev_mask is None or not req.prev_mask.any()):
            raise ValueError("geodesic refiner needs clicks or a previous mask")
        return geodesic_click_segment(
            req.crop_rgb,
            req.box_channel,
            req.clicks,
            req.prev_mask,
            epsilon=self.epsilon,
            core_erosion=self.core_erosion,
            bg_band_margin=self.bg_band_margin,
        )


# ---------------------------------------------------------------------------
# remote protocol


class RemoteRefiner:
    """HTTP POST /refine: {"instance_id", "stack_b64", "clicks", "round"}.

    The body carries the serialized input stack (base64 of the plane file);
    the reply must be {"mask": {"w", "h", "counts"}} on the same canvas.
    """

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        encoding: ClickEncoding = ClickEncoding(),
        timeout: float = 10.0,
        retries: int = 1,
        session=None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.encoding = encoding
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def _build_stack(self, req: RefineRequest) -> InputStack:
        if req.crop_rgb is None:
            raise ValueError("remote refiner needs the crop image")
        planes = [req.crop_rgb[:, :, 0], req.crop_rgb[:, :, 1], req.crop_rgb[:, :, 2]]
        names = ["r", "g", "b", "box"]
        planes.append(np.asarray(req.box_channel, dtype=np.float64))
        click_planes = rasterize_clicks(req.clicks, self.encoding, req.transform.outer)
        names += ["clicks_pos", "clicks_neg"] if self.encoding.dual_channel else ["clicks"]
        planes.extend(click_planes)
        return InputStack(names=tuple(names), planes=np.stack(planes).astype(np.float32))

    def refine(self, req: RefineRequest) -> Mask:
        payload = {
            "instance_id": req.instance_id,
            "round": req.round,
            "stack_b64": base64.b64encode(stack_to_bytes(self._build_stack(req))).decode("ascii"),
            "clicks": [
                {"x": c.x, "y": c.y, "polarity": c.polarity, "round": c.round}
                for c in req.clicks
            ],
        }
        last_exc: Optional[Exception] = None
        for _ in range(self.retries + 1):
            try:
                resp = self.session.post(
                    f"{self.endpoint}/refine", json=payload, timeout=self.timeout
                )
            except requests.Timeout as exc:
                last_exc = RemoteTimeoutError(str(exc))
                continue
            except requests.RequestException as exc:
                last_exc = RemoteTransportError(str(exc))
                continue
            if resp.status_code != 200:
                raise RemoteTransportError(f"refine endpoint returned {resp.status_code}")
            try:
                body = resp.json()
                mask = rle_decode(RleMask.from_json(body["mask"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise RemoteProtocolError(f"malformed refine reply: {exc}") from exc
            outer = req.transform.outer
            if mask.shape != (outer, outer):
                raise RemoteProtocolError(
                    f"refined mask is {mask.shape}, canvas is {outer}x{outer}"
                )
            return mask
        raise last_exc  # type: ignore[misc]


def make_refiner(kind: str, params: Optional[dict] = None, gt_canvas: Optional[Mask] = None):
    """Factory from (kind, params); the oracle additionally needs canvas gt."""
    params = dict(params or {})
    if kind == "healing-oracle":
        if gt_canvas is None:
            raise ValueError("healing oracle requires ground truth")
        corruption = params.pop("corruption", None)
        cfg = CorruptionConfig.from_json(corruption) if corruption else CorruptionConfig()
        return HealingOracleRefiner(gt_canvas, corruption=cfg, **params)
    if kind == "box-prior":
        return BoxPriorRefiner(**params)
    if kind == "geodesic-click":
        return GeodesicClickRefiner(**params)
    if kind == "remote":
        enc = params.pop("encoding", None)
        encoding = ClickEncoding.from_json(enc) if enc else ClickEncoding()
        return RemoteRefiner(encoding=encoding, **params)
    raise ValueError(f"unknown refiner kind: {kind}")
