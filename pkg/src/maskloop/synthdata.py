"""Procedural two/three-color scenes with exact ground-truth masks.

Each scene is a connected multi-part object (overlapping ellipses) on a
noisy background, plus optional distractor shapes sharing the object
palette. Object parts use colors well separated from the background; with
some probability one part is "weak" (close to the background color) so that
box-driven color models miss it and corrective clicks have work to do.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .masks import Box, Mask, rle_encode

CLASS_LABELS = ("round", "boxy", "mixed")


@dataclass(frozen=True)
class SceneConfig:
    min_image: int = 176
    max_image: int = 240
    min_object: int = 88
    max_object: int = 150
    parts: Tuple[int, int] = (3, 4)
    weak_part_prob: float = 0.8
    max_distractors: int = 3
    pixel_noise: float = 0.004
    color_margin: float = 0.4
    weak_margin: float = 0.1
    quant_bins: int = 8  # weak colors hide inside the background's histogram cell
    min_tight: int = 80  # tight gt bbox must pass the blueprint size filter


@dataclass
class Scene:
    rgb: np.ndarray  # (h, w, 3) float in [0, 1]
    gt: Mask
    label: str


def _ellipse(h, w, cx, cy, a, b, theta):
    yy, xx = np.indices((h, w), dtype=np.float64)
    xx += 0.5 - cx
    yy += 0.5 - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = xx * ct + yy * st
    v = -xx * st + yy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _pick_color(rng, away_from, min_dist):
    for _ in range(200):
        c = rng.uniform(0.05, 0.95, size=3)
        if all(np.linalg.norm(c - o) >= d for o, d in zip(away_from, min_dist)):
            return c
    return c


def _weak_color(bg: np.ndarray, margin: float, bins: int) -> np.ndarray:
    """A color close to bg that quantizes into the same bins-level cell.

    Coarse color histograms cannot tell it from the background while
    continuous color differences still can.
    """
    width = 1.0 / bins
    lo = np.floor(bg * bins) * width
    hi = lo + width
    corner = np.where(hi - bg > bg - lo, hi - 1e-4, lo + 1e-4)
    direction = corner - bg
    norm = float(np.linalg.norm(direction))
    if norm > margin:
        direction = direction * (margin / norm)
    return np.clip(bg + direction, 0.0, 1.0)


def generate_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> Scene:
    for _ in range(50):
        scene = _generate_scene_once(rng, cfg)
        box = tight_box(scene.gt)
        if box.w >= cfg.min_tight and box.h >= cfg.min_tight:
            return scene
    return scene  # pathological configs fall through with whatever came last


def _generate_scene_once(rng: np.random.Generator, cfg: SceneConfig) -> Scene:
    h = int(rng.integers(cfg.min_image, cfg.max_image + 1))
    w = int(rng.integers(cfg.min_image, cfg.max_image + 1))
    bg = rng.uniform(0.15, 0.85, size=3)
    rgb = np.tile(bg, (h, w, 1))

    ow = int(rng.integers(cfg.min_object, min(cfg.max_object, w - 16) + 1))
    oh = int(rng.integers(cfg.min_object, min(cfg.max_object, h - 16) + 1))
    ox = int(rng.integers(8, w - ow - 7))
    oy = int(rng.integers(8, h - oh - 7))

    n_parts = int(rng.integers(cfg.parts[0], cfg.parts[1] + 1))
    part_colors = [_pick_color(rng, [bg], [cfg.color_margin])]
    for _ in range(n_parts - 1):
        part_colors.append(_pick_color(rng, [bg], [cfg.color_margin]))
    n_weak = 0
    if n_parts >= 2 and rng.random() < cfg.weak_part_prob:
        n_weak = 2 if (n_parts >= 3 and rng.random() < 0.7) else 1
    for j in range(n_weak):
        part_colors[-(j + 1)] = _weak_color(bg, cfg.weak_margin, cfg.quant_bins)

    # distractors painted first so the object overwrites any overlap
    palette = part_colors[: max(1, n_parts - 1)]
    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        r = float(rng.uniform(10, 26))
        dcx = float(rng.uniform(r, w - r))
        dcy = float(rng.uniform(r, h - r))
        shape = _ellipse(h, w, dcx, dcy, r, r * rng.uniform(0.5, 1.0), rng.uniform(0, np.pi))
        color = palette[int(rng.integers(0, len(palette)))]
        rgb[shape] = color

    # connected object: first part anchors the bbox center, later parts overlap it
    gt = np.zeros((h, w), dtype=bool)
    ccx, ccy = ox + ow / 2.0, oy + oh / 2.0
    a0 = ow * rng.uniform(0.30, 0.45)
    b0 = oh * rng.uniform(0.30, 0.45)
    first = _ellipse(h, w, ccx, ccy, a0, b0, rng.uniform(0, np.pi))
    rgb[first] = part_colors[0]
    gt |= first
    for i in range(1, n_parts):
        ys, xs = np.nonzero(gt)
        k = int(rng.integers(0, len(xs)))
        big = i >= n_parts - n_weak  # a missing weak part must cost real IoU
        a = ow * (rng.uniform(0.24, 0.38) if big else rng.uniform(0.18, 0.34))
        b = oh * (rng.uniform(0.24, 0.38) if big else rng.uniform(0.18, 0.34))
        pcx = float(np.clip(xs[k] + rng.uniform(-0.4, 0.4) * a, ox + 4, ox + ow - 4))
        pcy = float(np.clip(ys[k] + rng.uniform(-0.4, 0.4) * b, oy + 4, oy + oh - 4))
        part = _ellipse(h, w, pcx, pcy, a, b, rng.uniform(0, np.pi))
        rgb[part] = part_colors[i]
        gt |= part

    if cfg.pixel_noise > 0:
        rgb = rgb + rng.normal(0.0, cfg.pixel_noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    label = CLASS_LABELS[int(rng.integers(0, len(CLASS_LABELS)))]
    return Scene(rgb=rgb, gt=gt, label=label)


def tight_box(gt: Mask) -> Box:
    ys, xs = np.nonzero(gt)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def build_manifest(
    count: int,
    seed: int,
    cfg: SceneConfig = SceneConfig(),
    image_dir: Optional[Path] = None,
) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Generate scenes and the dataset-manifest JSON structure.

    When image_dir is given the RGB scenes are written as PNG files and the
    manifest references them by path; otherwise paths point at in-memory ids
    and the images are returned in the store dict.
    """
    rng = np.random.default_rng(seed)
    images: List[dict] = []
    instances: List[dict] = []
    store: Dict[str, np.ndarray] = {}
    for i in range(count):
        scene = generate_scene(rng, cfg)
        image_id = f"img{i:05d}"
        h, w = scene.gt.shape
        if image_dir is not None:
            path = Path(image_dir) / f"{image_id}.png"
            Image.fromarray((scene.rgb * 255).astype(np.uint8)).save(path)
            ref = str(path)
        else:
            ref = image_id
            store[image_id] = scene.rgb
        box = tight_box(scene.gt)
        images.append({"id": image_id, "path": ref, "width": w, "height": h})
        instances.append(
            {
                "id": f"inst{i:05d}",
                "image_id": image_id,
                "class": scene.label,
                "bbox": [box.x, box.y, box.w, box.h],
                "gt_rle": rle_encode(scene.gt).to_json(),
            }
        )
    return {"images": images, "instances": instances}, store


def write_dataset(out_dir, count: int, seed: int, cfg: SceneConfig = SceneConfig()) -> Path:
    """Write PNG scenes plus manifest.json under out_dir; returns manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest, _ = build_manifest(count, seed, cfg, image_dir=out / "images")
    path = out / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f)
    return path
