"""Dataset manifests: import, polygon rasterization, and size filtering.

The on-disk manifest is JSON:
  {"images": [{"id", "path", "width", "height"}],
   "instances": [{"id", "image_id", "class", "bbox": [x, y, w, h],
                  "gt_rle": {...} | "gt_polygon": [[x0, y0, x1, y1, ...], ...]}]}

Ground truth is optional (live campaigns have none). Polygons are filled
with the even-odd rule sampled at pixel centers.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .masks import Box, Mask, RleMask, rle_decode, rle_encode

#: minimum instance sizes per profile; either orientation passes "campaign"
SIZE_FILTERS = {
    "blueprint": lambda w, h: w >= 80 and h >= 80,
    "campaign": lambda w, h: (w >= 80 and h >= 40) or (w >= 40 and h >= 80),
    "none": lambda w, h: True,
}


@dataclass(frozen=True)
class ManifestImage:
    id: str
    path: str
    width: int
    height: int


@dataclass(frozen=True)
class ManifestInstance:
    id: str
    image_id: str
    class_label: str
    box: Box
    gt: Optional[RleMask] = None


@dataclass
class DatasetManifest:
    images: Dict[str, ManifestImage]
    instances: List[ManifestInstance]
    image_store: Dict[str, np.ndarray] = field(default_factory=dict)

    def instance(self, instance_id: str) -> ManifestInstance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)

    def load_image(self, image_id: str) -> np.ndarray:
        """RGB image as float (h, w, 3) in [0, 1]."""
        if image_id in self.image_store:
            return self.image_store[image_id]
        meta = self.images[image_id]
        arr = np.asarray(Image.open(meta.path).convert("RGB"), dtype=np.float64) / 255.0
        self.image_store[image_id] = arr
        return arr

    def gt_mask(self, inst: ManifestInstance) -> Mask:
        if inst.gt is None:
            raise ValueError(f"instance {inst.id} has no ground truth")
        return rle_decode(inst.gt)

    @property
    def has_gt(self) -> bool:
        return all(inst.gt is not None for inst in self.instances)


def rasterize_polygons(rings: List[List[float]], width: int, height: int) -> Mask:
    """Even-odd scanline fill of one or more closed rings at pixel centers."""
    edges = []
    for ring in rings:
        if len(ring) < 6 or len(ring) % 2:
            raise ValueError("polygon rings need >= 3 (x, y) pairs")
        pts = [(ring[i], ring[i + 1]) for i in range(0, len(ring), 2)]
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
            if y0 != y1:
                edges.append((x0, y0, x1, y1))
    mask = np.zeros((height, width), dtype=bool)
    for y in range(height):
        yc = y + 0.5
        xs = []
        for x0, y0, x1, y1 in edges:
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                xs.append(x0 + (yc - y0) / (y1 - y0) * (x1 - x0))
        xs.sort()
        for i in range(0, len(xs) - 1, 2):
            lo = math.ceil(xs[i] - 0.5)
            hi = math.ceil(xs[i + 1] - 0.5)  # centers in [xs[i], xs[i+1])
            if hi > lo:
                mask[y, max(lo, 0) : min(hi, width)] = True
    return mask


def _instance_gt(obj: dict, width: int, height: int) -> Optional[RleMask]:
    if "gt_rle" in obj:
        return RleMask.from_json(obj["gt_rle"])
    if "gt_polygon" in obj:
        return rle_encode(rasterize_polygons(obj["gt_polygon"], width, height))
    return None


def load_manifest(
    data: dict,
    size_filter: str = "none",
    image_store: Optional[Dict[str, np.ndarray]] = None,
    base_dir: Optional[Path] = None,
):
    """Build a DatasetManifest from parsed JSON; returns (manifest, rejects).

    rejects is a list of {"id", "reason"} records for instances that were
    filtered out or reference missing files; they never abort the import.
    """
    if size_filter not in SIZE_FILTERS:
        raise ValueError(f"unknown size filter: {size_filter}")
    keep = SIZE_FILTERS[size_filter]
    images: Dict[str, ManifestImage] = {}
    rejects: List[dict] = []
    store = dict(image_store or {})
    for img in data.get("images", []):
        path = str(img["path"])
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        images[str(img["id"])] = ManifestImage(
            id=str(img["id"]), path=path, width=int(img["width"]), height=int(img["height"])
        )
    instances: List[ManifestInstance] = []
    for obj in data.get("instances", []):
        iid = str(obj["id"])
        image_id = str(obj["image_id"])
        if image_id not in images:
            rejects.append({"id": iid, "reason": f"unknown image {image_id}"})
            continue
        meta = images[image_id]
        if meta.id not in store and not Path(meta.path).exists():
            rejects.append({"id": iid, "reason": f"missing image file {meta.path}"})
            continue
        x, y, w, h = (float(v) for v in obj["bbox"])
        if not keep(w, h):
            rejects.append({"id": iid, "reason": f"size {w:.0f}x{h:.0f} below profile"})
            continue
        instances.append(
            ManifestInstance(
                id=iid,
                image_id=image_id,
                class_label=str(obj.get("class", "object")),
                box=Box(x, y, w, h),
                gt=_instance_gt(obj, meta.width, meta.height),
            )
        )
    return DatasetManifest(images=images, instances=instances, image_store=store), rejects


def import_manifest(path, size_filter: str = "none"):
    """Read a manifest file; relative image paths resolve against its folder."""
    path = Path(path)
    with open(path) as f:
        data = json.load(f)
    return load_manifest(data, size_filter=size_filter, base_dir=path.parent)
