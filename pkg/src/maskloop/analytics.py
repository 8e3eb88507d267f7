"""Campaign analytics over replayed instance states.

Every statistic is a pure function of the event log (via replay), so
live-then-analyze and replay-then-analyze agree. Simulated answers carry
duration 0 and are excluded from time statistics.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .annotator import extract_error_regions
from .campaign import SKIPPED, CampaignState, InstanceState
from .geometry import unwarp_mask, warp_mask
from .masks import boundary_f, iou, rle_decode

BOUNDARY_TOL = 5.0


def _non_increasing(areas: Sequence[float]) -> bool:
    return all(a >= b for a, b in zip(areas, areas[1:]))


def one_adjacent_transposition(areas: Sequence[float]) -> bool:
    """Non-increasing after at most one adjacent swap."""
    if _non_increasing(areas):
        return True
    areas = list(areas)
    for i in range(len(areas) - 1):
        areas[i], areas[i + 1] = areas[i + 1], areas[i]
        if _non_increasing(areas):
            return True
        areas[i], areas[i + 1] = areas[i + 1], areas[i]
    return False


@dataclass
class ClickOrderStats:
    fraction_exact: float
    fraction_approx: float
    mean_area_by_ordinal: List[float]
    rounds_counted: int
    rounds_skipped: int

    def to_json(self) -> dict:
        return vars(self)


def _round_click_areas(state: InstanceState, round_index: int, inner: int, outer: int):
    """Areas of the error regions each click targeted, recomputed from gt."""
    if state.gt is None or round_index - 1 not in state.masks:
        return None
    t = state.transform(inner, outer)
    gt_canvas = warp_mask(rle_decode(state.gt), t)
    prev = rle_decode(state.masks[round_index - 1])
    regions = extract_error_regions(prev, gt_canvas, 0)
    label = np.zeros(prev.shape, dtype=np.int64)
    areas = {0: 0}
    for r in regions:
        label[r.pixels[:, 1], r.pixels[:, 0]] = r.id + 1
        areas[r.id + 1] = r.area
    out = []
    h, w = prev.shape
    for c in state.answers[round_index].clicks:
        py = min(max(int(c.y), 0), h - 1)
        px = min(max(int(c.x), 0), w - 1)
        out.append(areas[int(label[py, px])])
    return out


def click_order_stats(
    state: CampaignState,
    approx_predicate: Callable[[Sequence[float]], bool] = one_adjacent_transposition,
) -> ClickOrderStats:
    """How often rounds click error regions in large-to-small order."""
    inner, outer = state.config.geometry
    exact = approx = counted = skipped = 0
    by_ordinal: Dict[int, List[float]] = {}
    for iid in sorted(state.instances):
        inst = state.instances[iid]
        for r in sorted(inst.answers):
            answer = inst.answers[r]
            if answer.kind != "clicks":
                continue
            areas = answer.region_areas
            if not areas or len(areas) != len(answer.clicks):
                areas = _round_click_areas(inst, r, inner, outer)
            if not areas:
                skipped += 1
                continue
            counted += 1
            if _non_increasing(areas):
                exact += 1
            if approx_predicate(areas):
                approx += 1
            for ordinal, area in enumerate(areas, start=1):
                by_ordinal.setdefault(ordinal, []).append(float(area))
    n = max(counted, 1)
    max_ordinal = max(by_ordinal) if by_ordinal else 0
    return ClickOrderStats(
        fraction_exact=exact / n,
        fraction_approx=approx / n,
        mean_area_by_ordinal=[
            float(np.mean(by_ordinal[k])) for k in range(1, max_ordinal + 1)
        ],
        rounds_counted=counted,
        rounds_skipped=skipped,
    )


@dataclass
class TimeStats:
    mean_seconds_by_answer_type: Dict[str, float]
    mean_seconds_by_round: Dict[int, float]
    first_action_mean_seconds: float
    inter_click_gap_mean_seconds: float
    quantiles_by_class: Dict[str, List[float]]  # [q10, q90] per class
    answers_counted: int

    def to_json(self) -> dict:
        return {
            "mean_seconds_by_answer_type": self.mean_seconds_by_answer_type,
            "mean_seconds_by_round": {str(k): v for k, v in self.mean_seconds_by_round.items()},
            "first_action_mean_seconds": self.first_action_mean_seconds,
            "inter_click_gap_mean_seconds": self.inter_click_gap_mean_seconds,
            "quantiles_by_class": self.quantiles_by_class,
            "answers_counted": self.answers_counted,
        }


def _answer_type(answer) -> str:
    if answer.kind == "clicks":
        return str(len(answer.clicks))
    return answer.kind


def time_stats(state: CampaignState) -> TimeStats:
    """Timing of human answers; simulated (zero-duration) answers are excluded."""
    by_type: Dict[str, List[float]] = {}
    by_round: Dict[int, List[float]] = {}
    by_class: Dict[str, List[float]] = {}
    first_actions: List[float] = []
    gaps: List[float] = []
    counted = 0
    for iid in sorted(state.instances):
        inst = state.instances[iid]
        for r in sorted(inst.answers):
            answer = inst.answers[r]
            if answer.duration_ms <= 0:
                continue
            counted += 1
            seconds = answer.duration_ms / 1000.0
            by_type.setdefault(_answer_type(answer), []).append(seconds)
            by_round.setdefault(r, []).append(seconds)
            by_class.setdefault(inst.class_label, []).append(seconds)
            times = sorted(c.t_ms for c in answer.clicks)
            if times:
                first_actions.append(times[0] / 1000.0)
                gaps.extend((b - a) / 1000.0 for a, b in zip(times, times[1:]))
    return TimeStats(
        mean_seconds_by_answer_type={k: float(np.mean(v)) for k, v in sorted(by_type.items())},
        mean_seconds_by_round={k: float(np.mean(v)) for k, v in sorted(by_round.items())},
        first_action_mean_seconds=float(np.mean(first_actions)) if first_actions else 0.0,
        inter_click_gap_mean_seconds=float(np.mean(gaps)) if gaps else 0.0,
        quantiles_by_class={
            k: [float(np.quantile(v, 0.1)), float(np.quantile(v, 0.9))]
            for k, v in sorted(by_class.items())
        },
        answers_counted=counted,
    )


@dataclass
class QualityPoint:
    round: int
    cum_clicks_mean: float
    cum_seconds_mean: float
    miou: float
    mboundary_f: float
    n: int

    def to_json(self) -> dict:
        return vars(self)


def quality_vs_budget_curve(state: CampaignState) -> List[QualityPoint]:
    """Mean mask quality per round against cumulative annotation budget.

    Instances without gt are excluded (and simply not counted); skipped
    instances have no mask and are excluded as well. Terminal masks carry
    forward to later rounds.
    """
    inner, outer = state.config.geometry
    usable = []
    for iid in sorted(state.instances):
        inst = state.instances[iid]
        if inst.gt is None or inst.status == SKIPPED or not inst.masks:
            continue
        gt_image = rle_decode(inst.gt)
        t = inst.transform(inner, outer)
        per_round = {}
        for r in sorted(inst.masks):
            mask = unwarp_mask(rle_decode(inst.masks[r]), t)
            per_round[r] = (iou(mask, gt_image), boundary_f(mask, gt_image, BOUNDARY_TOL))
        usable.append((inst, per_round))
    if not usable:
        return []
    points = []
    for r in range(0, state.config.rounds + 1):
        ious, bfs, clicks, seconds = [], [], [], []
        for inst, per_round in usable:
            k = min(r, max(per_round))
            ious.append(per_round[k][0])
            bfs.append(per_round[k][1])
            clicks.append(inst.cumulative_clicks(r))
            seconds.append(
                sum(
                    a.duration_ms / 1000.0
                    for rr, a in inst.answers.items()
                    if rr <= r
                )
            )
        points.append(
            QualityPoint(
                round=r,
                cum_clicks_mean=float(np.mean(clicks)),
                cum_seconds_mean=float(np.mean(seconds)),
                miou=float(np.mean(ious)),
                mboundary_f=float(np.mean(bfs)),
                n=len(ious),
            )
        )
    return points


@dataclass
class CampaignReport:
    answer_fractions_by_round: Dict[int, Dict[str, float]]
    cum_clicks_mean_by_round: Dict[int, float]
    status_counts: Dict[str, int]
    miou_excluding_skips: Optional[float]
    miou_with_skips_as_zero: Optional[float]
    click_order: ClickOrderStats
    times: TimeStats
    quality_curve: List[QualityPoint] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "answer_fractions_by_round": {
                str(r): d for r, d in self.answer_fractions_by_round.items()
            },
            "cum_clicks_mean_by_round": {
                str(r): v for r, v in self.cum_clicks_mean_by_round.items()
            },
            "status_counts": self.status_counts,
            "miou_excluding_skips": self.miou_excluding_skips,
            "miou_with_skips_as_zero": self.miou_with_skips_as_zero,
            "click_order": self.click_order.to_json(),
            "times": self.times.to_json(),
            "quality_curve": [p.to_json() for p in self.quality_curve],
        }


def build_report(state: CampaignState) -> CampaignReport:
    by_round: Dict[int, Dict[str, int]] = {}
    cum_by_round: Dict[int, List[int]] = {}
    status_counts: Dict[str, int] = {}
    for iid in sorted(state.instances):
        inst = state.instances[iid]
        status_counts[inst.status] = status_counts.get(inst.status, 0) + 1
        for r in sorted(inst.answers):
            t = _answer_type(inst.answers[r])
            by_round.setdefault(r, {}).setdefault(t, 0)
            by_round[r][t] += 1
        for r in range(1, state.config.rounds + 1):
            cum_by_round.setdefault(r, []).append(inst.cumulative_clicks(r))
    fractions = {
        r: {t: c / sum(counts.values()) for t, c in sorted(counts.items())}
        for r, counts in sorted(by_round.items())
    }
    curve = quality_vs_budget_curve(state)
    final_ious = []
    skip_count = 0
    for iid in sorted(state.instances):
        inst = state.instances[iid]
        if inst.gt is None:
            continue
        if inst.status == SKIPPED:
            skip_count += 1
            continue
        if not inst.masks:
            continue
        inner, outer = state.config.geometry
        mask = unwarp_mask(rle_decode(inst.final_mask), inst.transform(inner, outer))
        final_ious.append(iou(mask, rle_decode(inst.gt)))
    miou_excl = float(np.mean(final_ious)) if final_ious else None
    miou_with = (
        float(np.sum(final_ious) / (len(final_ious) + skip_count)) if final_ious else None
    )
    return CampaignReport(
        answer_fractions_by_round=fractions,
        cum_clicks_mean_by_round={r: float(np.mean(v)) for r, v in sorted(cum_by_round.items())},
        status_counts=dict(sorted(status_counts.items())),
        miou_excluding_skips=miou_excl,
        miou_with_skips_as_zero=miou_with,
        click_order=click_order_stats(state),
        times=time_stats(state),
        quality_curve=curve,
    )


def write_report(state: CampaignState, out_dir) -> Path:
    """CSV + JSON report bundle; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(state)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_json(), f, indent=2)
    with open(out / "quality_curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "cum_clicks", "cum_seconds", "miou", "boundary_f", "n"])
        for p in report.quality_curve:
            writer.writerow(
                [
                    p.round,
                    f"{p.cum_clicks_mean:.6f}",
                    f"{p.cum_seconds_mean:.6f}",
                    f"{p.miou:.6f}",
                    f"{p.mboundary_f:.6f}",
                    p.n,
                ]
            )
    with open(out / "answers.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["instance", "round", "type", "clicks", "duration_ms"])
        for iid in sorted(state.instances):
            inst = state.instances[iid]
            for r in sorted(inst.answers):
                a = inst.answers[r]
                writer.writerow([iid, r, a.kind, len(a.clicks), a.duration_ms])
    return out
