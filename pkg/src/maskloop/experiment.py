"""Simulated campaign runs: k-clicks x r-rounds grids over a manifest with gt.

Each instance is driven independently (parallelizable) with RNG substreams
keyed by (seed, instance id, purpose), so results are bit-reproducible for a
fixed seed regardless of worker count. Per-instance event lists are appended
to the log in instance order after the parallel section, which makes the log
itself deterministic too.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .annotator import perturb_box, simulate_round
from .campaign import (
    AnswerRecord,
    CampaignConfig,
    EventLog,
    answer_event,
    config_event,
    import_event,
    mask_event,
)
from .geometry import make_transform, render_box_channel, unwarp_mask, warp_image, warp_mask
from .manifest import DatasetManifest, ManifestInstance
from .masks import boundary_f, iou, rle_encode
from .refiners import RefineRequest, make_refiner
from .seeding import rng_stream

#: an experiment spec is a campaign config; the manifest rides alongside
ExperimentSpec = CampaignConfig

BOUNDARY_TOL = 5.0


@dataclass
class InstanceResult:
    instance_id: str
    status: str
    final_round: int
    clicks_total: int
    round_iou: List[float]  # index = round, carried forward after terminal
    round_boundary_f: List[float]
    round_clicks: List[int]
    events: List[dict] = field(default_factory=list)

    @property
    def final_iou(self) -> float:
        return self.round_iou[-1]

    @property
    def final_boundary_f(self) -> float:
        return self.round_boundary_f[-1]


@dataclass
class RoundAggregate:
    round: int
    cum_clicks_mean: float
    miou: float
    mboundary_f: float
    n: int


@dataclass
class ExperimentResult:
    config: CampaignConfig
    per_round: List[RoundAggregate]
    per_instance: List[InstanceResult]

    def events(self) -> List[dict]:
        out = [config_event(self.config)]
        for r in self.per_instance:
            out.extend(r.events)
        return out

    def write_log(self, path):
        log = EventLog(None)
        log.extend(self.events())
        log.write_to(path)


def _needs_rgb(kind: str) -> bool:
    return kind in ("box-prior", "geodesic-click", "remote")


def run_instance(
    inst: ManifestInstance,
    manifest: DatasetManifest,
    config: CampaignConfig,
    boundary_metric: bool = True,
) -> InstanceResult:
    inner, outer = config.geometry
    gt_image = manifest.gt_mask(inst)
    box = inst.box
    if config.box_sigma > 0:
        box = perturb_box(
            inst.box, config.box_sigma, config.box_min_iou, rng_stream(config.seed, inst.id, "box")
        )
    t = make_transform(box, inst_width(inst, manifest), inst_height(inst, manifest), inner, outer)
    gt_canvas = warp_mask(gt_image, t)
    box_channel = render_box_channel(box, t)
    crop = None
    if _needs_rgb(config.initial_kind) or _needs_rgb(config.refiner):
        crop = warp_image(manifest.load_image(inst.image_id), t)

    def build(kind):
        params = config.params_for(kind)
        if kind == "healing-oracle":
            params.setdefault("seed", config.seed)
        return make_refiner(kind, params, gt_canvas=gt_canvas)

    initial = build(config.initial_kind)
    refiner = initial if config.refiner == config.initial_kind else build(config.refiner)
    model = replace(config.annotator, max_clicks_per_round=config.clicks_per_round)

    events = [
        import_event(
            inst.id, inst.class_label, inst.image_id,
            inst_width(inst, manifest), inst_height(inst, manifest), box, inst.gt,
        )
    ]
    mask0 = initial.refine(
        RefineRequest(inst.id, 0, [], None, t, box_channel, crop)
    )
    events.append(mask_event(inst.id, 0, rle_encode(mask0), initial.kind))

    def score(canvas_mask):
        img_mask = unwarp_mask(canvas_mask, t)
        bf = boundary_f(img_mask, gt_image, BOUNDARY_TOL) if boundary_metric else 0.0
        return iou(img_mask, gt_image), bf

    iou0, bf0 = score(mask0)
    round_iou, round_bf, round_clicks = [iou0], [bf0], [0]
    prev = mask0
    clicks_acc = []
    status = "exhausted"
    final_round = 0
    for r in range(1, config.rounds + 1):
        answer = simulate_round(prev, gt_canvas, model, r, rng_stream(config.seed, inst.id, f"round{r}"))
        record = AnswerRecord(
            kind=answer.kind, clicks=answer.clicks, region_areas=answer.region_areas
        )
        events.append(answer_event(inst.id, r, record))
        if answer.kind == "zero_clicks":
            status = "accepted"
            round_iou.append(round_iou[-1])
            round_bf.append(round_bf[-1])
            round_clicks.append(round_clicks[-1])
            break
        clicks_acc = clicks_acc + list(answer.clicks)
        mask = refiner.refine(
            RefineRequest(inst.id, r, list(clicks_acc), prev, t, box_channel, crop)
        )
        events.append(mask_event(inst.id, r, rle_encode(mask), refiner.kind))
        iou_r, bf_r = score(mask)
        round_iou.append(iou_r)
        round_bf.append(bf_r)
        round_clicks.append(len(clicks_acc))
        prev = mask
        final_round = r
    return InstanceResult(
        instance_id=inst.id,
        status=status,
        final_round=final_round,
        clicks_total=len(clicks_acc),
        round_iou=round_iou,
        round_boundary_f=round_bf,
        round_clicks=round_clicks,
        events=events,
    )


def inst_width(inst: ManifestInstance, manifest: DatasetManifest) -> int:
    return manifest.images[inst.image_id].width


def inst_height(inst: ManifestInstance, manifest: DatasetManifest) -> int:
    return manifest.images[inst.image_id].height


def run_experiment(
    config: CampaignConfig,
    manifest: DatasetManifest,
    workers: int = 1,
    boundary_metric: bool = True,
) -> ExperimentResult:
    """Drive every manifest instance through the configured schedule."""
    if not manifest.instances:
        raise ValueError("manifest has no instances")
    if not manifest.has_gt:
        raise ValueError("simulation requires ground truth for every instance")
    instances = sorted(manifest.instances, key=lambda i: i.id)
    runner = lambda i: run_instance(i, manifest, config, boundary_metric=boundary_metric)
    if workers <= 1:
        results = [runner(i) for i in instances]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(runner, instances))

    per_round = []
    for r in range(0, config.rounds + 1):
        ious, bfs, clicks = [], [], []
        for res in results:
            k = min(r, len(res.round_iou) - 1)  # carry terminal masks forward
            ious.append(res.round_iou[k])
            bfs.append(res.round_boundary_f[k])
            clicks.append(res.round_clicks[k])
        per_round.append(
            RoundAggregate(
                round=r,
                cum_clicks_mean=float(np.mean(clicks)),
                miou=float(np.mean(ious)),
                mboundary_f=float(np.mean(bfs)),
                n=len(results),
            )
        )
    return ExperimentResult(config=config, per_round=per_round, per_instance=results)


def parse_schedule(cell: str):
    """"3x3" -> (clicks_per_round=3, rounds=3); the k x r convention."""
    try:
        k, r = cell.lower().split("x")
        return int(k), int(r)
    except Exception as exc:
        raise ValueError(f"bad schedule {cell!r}, expected KxR like 3x3") from exc


def run_grid(
    base: CampaignConfig,
    cells: List[str],
    manifest: DatasetManifest,
    workers: int = 1,
) -> Dict[str, ExperimentResult]:
    out = {}
    for cell in cells:
        k, r = parse_schedule(cell)
        config = replace(base, clicks_per_round=k, rounds=r)
        out[cell] = run_experiment(config, manifest, workers=workers)
    return out


def write_grid_csv(results: Dict[str, ExperimentResult], path):
    """One row per (schedule, round): the clicks-vs-quality curve data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["schedule", "round", "cum_clicks", "miou", "boundary_f", "n"])
        for cell in sorted(results):
            for agg in results[cell].per_round:
                writer.writerow(
                    [
                        cell,
                        agg.round,
                        f"{agg.cum_clicks_mean:.6f}",
                        f"{agg.miou:.6f}",
                        f"{agg.mboundary_f:.6f}",
                        agg.n,
                    ]
                )


def write_instances_csv(result: ExperimentResult, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["instance", "status", "final_round", "clicks_total", "final_iou", "final_boundary_f"]
        )
        for res in result.per_instance:
            writer.writerow(
                [
                    res.instance_id,
                    res.status,
                    res.final_round,
                    res.clicks_total,
                    f"{res.final_iou:.6f}",
                    f"{res.final_boundary_f:.6f}",
                ]
            )


def write_aggregates_json(results: Dict[str, ExperimentResult], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        cell: {
            "per_round": [vars(a) for a in r.per_round],
            "config": r.config.to_json(),
        }
        for cell, r in results.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
