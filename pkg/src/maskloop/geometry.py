"""Crop/scale geometry between image space and the model canvas.

The object box is scaled to fit an inner square centered on a larger square
canvas; the remaining border captures context (black padding outside the
source image). Canvas coordinates are continuous, pixel i covers [i, i+1)
with its center at i + 0.5; rasterization samples pixel centers.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .masks import Box, Mask

#: named (inner, outer) geometry profiles; "mini" keeps desk-scale runs fast
PROFILES = {
    "blueprint": (193, 385),
    "campaign": (385, 513),
    "mini": (96, 128),
}

STACK_MAGIC = b"MSK1"


@dataclass(frozen=True)
class CropTransform:
    """Similarity map from image pixels to canvas pixels.

    canvas = image * scale + offset; aspect ratio is preserved (one scale for
    both axes). image_w/image_h are the source dimensions, needed to invert.
    """

    scale: float
    offset_x: float
    offset_y: float
    inner: int
    outer: int
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not self.inner < self.outer:
            raise ValueError("inner square must be smaller than the canvas")

    def to_canvas(self, x, y):
        return x * self.scale + self.offset_x, y * self.scale + self.offset_y

    def to_image(self, cx, cy):
        return (cx - self.offset_x) / self.scale, (cy - self.offset_y) / self.scale

    def canvas_box(self, box: Box) -> Box:
        x, y = self.to_canvas(box.x, box.y)
        return Box(x, y, box.w * self.scale, box.h * self.scale)


def make_transform(box: Box, image_w: int, image_h: int, inner: int, outer: int) -> CropTransform:
    """Scale the box to fit inner x inner (keeping aspect) centered on the canvas."""
    scale = inner / max(box.w, box.h)
    return CropTransform(
        scale=scale,
        offset_x=outer / 2.0 - scale * box.cx,
        offset_y=outer / 2.0 - scale * box.cy,
        inner=inner,
        outer=outer,
        image_w=image_w,
        image_h=image_h,
    )


def _canvas_source_coords(t: CropTransform):
    """Continuous source coordinate of every canvas pixel center."""
    cy, cx = np.indices((t.outer, t.outer), dtype=np.float64)
    sx = (cx + 0.5 - t.offset_x) / t.scale
    sy = (cy + 0.5 - t.offset_y) / t.scale
    return sx, sy


def warp_image(image: np.ndarray, t: CropTransform) -> np.ndarray:
    """Bilinear resample of an (h, w, 3) float image onto the canvas.

    Areas outside the source are black. Values stay within [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    sx, sy = _canvas_source_coords(t)
    # bilinear sample in index space where pixel i sits at coordinate i + 0.5
    fx = sx - 0.5
    fy = sy - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = fx - x0
    ay = fy - y0
    out = np.zeros((t.outer, t.outer) + image.shape[2:], dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (ax if dx else 1.0 - ax) * (ay if dy else 1.0 - ay)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi = np.clip(xi, 0, w - 1)
            yi = np.clip(yi, 0, h - 1)
            contrib = image[yi, xi] * np.where(valid, weight, 0.0)[..., None]
            out += contrib
    return np.clip(out, 0.0, 1.0)


def warp_mask(m: Mask, t: CropTransform) -> Mask:
    """Nearest-neighbor resample of a mask onto the canvas (binary preserving)."""
    m = np.asarray(m, dtype=bool)
    h, w = m.shape
    sx, sy = _canvas_source_coords(t)
    xi = np.floor(sx).astype(np.int64)
    yi = np.floor(sy).astype(np.int64)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros((t.outer, t.outer), dtype=bool)
    out[valid] = m[yi[valid], xi[valid]]
    return out


def unwarp_mask(canvas_mask: Mask, t: CropTransform) -> Mask:
    """Map a canvas mask back to image space (nearest-neighbor)."""
    canvas_mask = np.asarray(canvas_mask, dtype=bool)
    iy, ix = np.indices((t.image_h, t.image_w), dtype=np.float64)
    cx, cy = t.to_canvas(ix + 0.5, iy + 0.5)
    xi = np.floor(cx).astype(np.int64)
    yi = np.floor(cy).astype(np.int64)
    valid = (xi >= 0) & (xi < t.outer) & (yi >= 0) & (yi < t.outer)
    out = np.zeros((t.image_h, t.image_w), dtype=bool)
    out[valid] = canvas_mask[yi[valid], xi[valid]]
    return out


def image_footprint(t: CropTransform) -> Mask:
    """Canvas pixels whose centers sample inside the source image."""
    sx, sy = _canvas_source_coords(t)
    xi = np.floor(sx)
    yi = np.floor(sy)
    return (xi >= 0) & (xi < t.image_w) & (yi >= 0) & (yi < t.image_h)


@dataclass(frozen=True)
class ClickEncoding:
    """How corrective clicks become input planes.

    kind: "disk" (1 within radius), "gaussian" (exp(-d^2/2 sigma^2)) or
    "distance-transform" (1 at the click, falling to 0 at the truncation).
    dual_channel routes positive clicks to plane 0 and negative to plane 1;
    single-channel pastes every click into one plane.
    """

    kind: str = "disk"
    radius: float = 5.0
    sigma: float = 10.0
    truncation: float = 20.0
    dual_channel: bool = True

    def __post_init__(self):
        if self.kind not in ("disk", "gaussian", "distance-transform"):
            raise ValueError(f"unknown click encoding: {self.kind}")
        if self.radius < 0 or self.sigma <= 0 or self.truncation <= 0:
            raise ValueError("invalid encoding parameters")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "radius": self.radius,
            "sigma": self.sigma,
            "truncation": self.truncation,
            "dual_channel": self.dual_channel,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClickEncoding":
        return cls(**obj)


def rasterize_clicks(clicks: Sequence, enc: ClickEncoding, outer: int) -> np.ndarray:
    """Render clicks into 1 (single) or 2 (dual fg/bg) canvas planes in [0, 1]."""
    for c in clicks:
        if not (0 <= c.x < outer and 0 <= c.y < outer):
            raise ValueError(f"click ({c.x}, {c.y}) outside {outer}x{outer} canvas")
    n_planes = 2 if enc.dual_channel else 1
    planes = np.zeros((n_planes, outer, outer), dtype=np.float64)
    if not clicks:
        return planes
    cy, cx = np.indices((outer, outer), dtype=np.float64)
    cx += 0.5
    cy += 0.5
    for c in clicks:
        d_sq = (cx - c.x) ** 2 + (cy - c.y) ** 2
        if enc.kind == "disk":
            value = (d_sq <= enc.radius**2).astype(np.float64)
        elif enc.kind == "gaussian":
            value = np.exp(-d_sq / (2.0 * enc.sigma**2))
        else:
            d = np.minimum(np.sqrt(d_sq), enc.truncation)
            value = 1.0 - d / enc.truncation
        idx = 0 if (not enc.dual_channel or c.polarity == "positive") else 1
        np.maximum(planes[idx], value, out=planes[idx])
    return planes


def render_box_channel(box: Box, t: CropTransform) -> np.ndarray:
    """Binary inside/outside rendering of the warped box on the canvas."""
    cb = t.canvas_box(box)
    cy, cx = np.indices((t.outer, t.outer), dtype=np.float64)
    cx += 0.5
    cy += 0.5
    return ((cx >= cb.x) & (cx <= cb.x2) & (cy >= cb.y) & (cy <= cb.y2)).astype(
        np.float64
    )


@dataclass(frozen=True)
class InputStack:
    """Named canvas planes in fixed order: rgb, box, then click channels."""

    names: tuple
    planes: np.ndarray  # (channels, outer, outer) float32 in [0, 1]

    def __post_init__(self):
        if len(self.names) != self.planes.shape[0]:
            raise ValueError("channel names and planes disagree")
        if self.planes.shape[1] != self.planes.shape[2]:
            raise ValueError("planes must be square")

    @property
    def outer(self) -> int:
        return self.planes.shape[1]


def build_input_stack(
    crop_rgb: np.ndarray,
    box: Box,
    t: CropTransform,
    clicks: Sequence = (),
    enc: Optional[ClickEncoding] = None,
) -> InputStack:
    """Assemble the model input: 4 channels for box-only, 5 or 6 with clicks.

    A single-channel encoding adds one "clicks" plane; a dual encoding adds
    "clicks_pos"/"clicks_neg". With no clicks and no encoding, box-only.
    """
    crop_rgb = np.asarray(crop_rgb, dtype=np.float64)
    if crop_rgb.shape != (t.outer, t.outer, 3):
        raise ValueError("crop must be (outer, outer, 3)")
    names: List[str] = ["r", "g", "b", "box"]
    planes = [crop_rgb[:, :, 0], crop_rgb[:, :, 1], crop_rgb[:, :, 2]]
    planes.append(render_box_channel(box, t))
    if enc is not None:
        click_planes = rasterize_clicks(clicks, enc, t.outer)
        if enc.dual_channel:
            names += ["clicks_pos", "clicks_neg"]
        else:
            names += ["clicks"]
        planes.extend(click_planes)
    stack = np.stack(planes).astype(np.float32)
    return InputStack(names=tuple(names), planes=stack)


def stack_to_bytes(stack: InputStack) -> bytes:
    """Serialize: magic, u32 outer, u32 channels, (u16 len + name)*, f32 planes.

    All integers little-endian; planes row-major float32.
    """
    out = [STACK_MAGIC, struct.pack("<II", stack.outer, len(stack.names))]
    for name in stack.names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    out.append(np.ascontiguousarray(stack.planes, dtype="<f4").tobytes())
    return b"".join(out)


def stack_from_bytes(data: bytes) -> InputStack:
    if data[:4] != STACK_MAGIC:
        raise ValueError("bad stack magic")
    outer, n_channels = struct.unpack_from("<II", data, 4)
    pos = 12
    names = []
    for _ in range(n_channels):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        names.append(data[pos : pos + ln].decode("utf-8"))
        pos += ln
    planes = np.frombuffer(data, dtype="<f4", offset=pos, count=n_channels * outer * outer)
    return InputStack(names=tuple(names), planes=planes.reshape(n_channels, outer, outer).copy())
