"""Live campaign engine: task leasing, answer ingestion, batch refinement.

One engine owns one campaign (config + event log + instance states). All
public methods hold a single lock: per-instance events stay serialized and
the log appender is the only shared mutable resource. State changes append
exactly one event before mutating in-memory state, so a server restarted
from the log reconstructs identical state.
"""

import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .annotator import Click
from .campaign import (
    ACTIVE,
    AnswerRecord,
    CampaignConfig,
    CampaignState,
    EventLog,
    answer_event,
    apply_event,
    config_event,
    import_event,
    lease_event,
    mask_event,
)
from .geometry import render_box_channel, warp_image, warp_mask
from .manifest import DatasetManifest
from .masks import RleMask, rle_decode, rle_encode
from .refiners import RefineError, RefineRequest, make_refiner
from .seeding import rng_stream


class CampaignError(Exception):
    pass


class NotFoundError(CampaignError):
    pass


class ConflictError(CampaignError):
    pass


class InvalidAnswerError(CampaignError):
    pass


@dataclass
class TaskLease:
    task_id: str
    instance_id: str
    round: int
    annotator: str
    expires: float
    response: Optional[dict] = None  # idempotency cache: (body_hash, result)
    body_hash: Optional[str] = None


class CampaignEngine:
    def __init__(
        self,
        config: CampaignConfig,
        manifest: DatasetManifest,
        log: EventLog,
        policies: Optional[Dict[str, str]] = None,
        scores: Optional[Dict[str, float]] = None,
        allow_oracle: bool = False,
        clock=time.time,
    ):
        if config.refiner == "healing-oracle" and not allow_oracle:
            raise ValueError("the healing oracle is not allowed in a live campaign")
        self.manifest = manifest
        self.log = log
        self.policies = policies or {}
        self.scores = scores or {}
        self.clock = clock
        self._lock = threading.RLock()
        self._leases: Dict[str, TaskLease] = {}
        self._by_instance: Dict[str, TaskLease] = {}
        self._crop_cache: Dict[str, np.ndarray] = {}
        self.parked: List[str] = []

        self.state = CampaignState(config=config)
        if log.records:
            expected = config_event(config)["data"]
            if log.records[0]["kind"] != "config" or log.records[0]["data"] != expected:
                raise ValueError("event log belongs to a different campaign config")
            for record in log.records:
                apply_event(self.state, record)
        else:
            self._append(config_event(config))

    # ------------------------------------------------------------------
    # event plumbing

    def _append(self, event: dict) -> dict:
        record = self.log.append(event)
        apply_event(self.state, record)
        return record

    def import_instances(self, manifest: Optional[DatasetManifest] = None) -> int:
        """Append import events for manifest instances not yet in the campaign."""
        manifest = manifest or self.manifest
        added = 0
        with self._lock:
            for inst in manifest.instances:
                if inst.id in self.state.instances:
                    continue
                meta = manifest.images[inst.image_id]
                box = inst.box
                if self.state.config.box_sigma > 0:
                    from .annotator import perturb_box

                    box = perturb_box(
                        inst.box,
                        self.state.config.box_sigma,
                        self.state.config.box_min_iou,
                        rng_stream(self.state.config.seed, inst.id, "box"),
                    )
                self._append(
                    import_event(
                        inst.id, inst.class_label, inst.image_id,
                        meta.width, meta.height, box, inst.gt,
                    )
                )
                added += 1
        return added

    # ------------------------------------------------------------------
    # geometry and refiners

    def _transform(self, inst):
        inner, outer = self.state.config.geometry
        return inst.transform(inner, outer)

    def _crop(self, inst) -> np.ndarray:
        if inst.instance_id not in self._crop_cache:
            image = self.manifest.load_image(inst.image_ref)
            self._crop_cache[inst.instance_id] = warp_image(image, self._transform(inst))
        return self._crop_cache[inst.instance_id]

    def _refiner_for(self, inst, kind: str):
        params = self.state.config.params_for(kind)
        gt_canvas = None
        if kind == "healing-oracle":
            params.setdefault("seed", self.state.config.seed)
            gt_canvas = warp_mask(rle_decode(inst.gt), self._transform(inst))
        return make_refiner(kind, params, gt_canvas=gt_canvas)

    def _refine(self, inst, round_index: int) -> RleMask:
        t = self._transform(inst)
        kind = (
            self.state.config.initial_kind if round_index == 0 else self.state.config.refiner
        )
        refiner = self._refiner_for(inst, kind)
        needs_rgb = kind in ("box-prior", "geodesic-click", "remote")
        request = RefineRequest(
            instance_id=inst.instance_id,
            round=round_index,
            clicks=inst.clicks_through(round_index),
            prev_mask=rle_decode(inst.masks[round_index - 1]) if round_index > 0 else None,
            transform=t,
            box_channel=render_box_channel(inst.box, t),
            crop_rgb=self._crop(inst) if needs_rgb else None,
        )
        return rle_encode(refiner.refine(request))

    # ------------------------------------------------------------------
    # round advancement

    def advance_round(self) -> dict:
        """Refine every instance with a pending round (incl. round-0 bootstrap).

        Refiner failures park the instance for retry and never abort the batch.
        """
        with self._lock:
            refined = 0
            failures = []
            self.parked = []
            for iid in sorted(self.state.instances):
                inst = self.state.instances[iid]
                pending = inst.pending_refine_round
                if pending is None:
                    continue
                try:
                    rle = self._refine(inst, pending)
                except (RefineError, ValueError) as exc:
                    failures.append({"instance": iid, "round": pending, "error": str(exc)})
                    self.parked.append(iid)
                    continue
                kind = (
                    self.state.config.initial_kind
                    if pending == 0
                    else self.state.config.refiner
                )
                self._append(mask_event(iid, pending, rle, kind))
                refined += 1
            return {"refined": refined, "failures": failures}

    # ------------------------------------------------------------------
    # leasing

    def _expire_leases(self):
        now = self.clock()
        for task_id in [t for t, l in self._leases.items() if l.expires <= now]:
            lease = self._leases.pop(task_id)
            self._by_instance.pop(lease.instance_id, None)

    def next_task(self, annotator: str) -> Optional[dict]:
        """Lease the lowest-scored answerable instance; idempotent per annotator."""
        with self._lock:
            self._expire_leases()
            for lease in self._leases.values():
                if lease.annotator == annotator and lease.response is None:
                    inst = self.state.instances[lease.instance_id]
                    if inst.current_round == lease.round:
                        return self._lease_payload(lease)
            candidates = [
                inst
                for inst in self.state.instances.values()
                if inst.current_round is not None and inst.instance_id not in self._by_instance
            ]
            if not candidates:
                return None
            candidates.sort(
                key=lambda i: (self.scores.get(i.instance_id, float("inf")), i.instance_id)
            )
            inst = candidates[0]
            lease = TaskLease(
                task_id=uuid.uuid4().hex,
                instance_id=inst.instance_id,
                round=inst.current_round,
                annotator=annotator,
                expires=self.clock() + self.state.config.lease_seconds,
            )
            self._leases[lease.task_id] = lease
            self._by_instance[inst.instance_id] = lease
            self._append(
                lease_event(inst.instance_id, lease.round, lease.task_id, annotator, lease.expires)
            )
            return self._lease_payload(lease)

    def _lease_payload(self, lease: TaskLease) -> dict:
        inst = self.state.instances[lease.instance_id]
        t = self._transform(inst)
        cb = t.canvas_box(inst.box)
        return {
            "task_id": lease.task_id,
            "instance_id": lease.instance_id,
            "round": lease.round,
            "annotator": lease.annotator,
            "expires": lease.expires,
            "max_clicks": self.state.config.clicks_per_round,
            "outer": t.outer,
            "crop_url": f"/api/v1/crops/{lease.instance_id}.png",
            "box_canvas": [cb.x, cb.y, cb.w, cb.h],
            "mask": inst.masks[lease.round - 1].to_json(),
            "policy": self.policies.get(inst.class_label, ""),
            "class": inst.class_label,
        }

    # ------------------------------------------------------------------
    # answers

    def submit_answer(
        self, task_id: str, kind: str, clicks: List[dict], duration_ms: int, body_hash: str
    ) -> dict:
        """Record one answer for a leased task; idempotent for a repeated body."""
        with self._lock:
            lease = self._leases.get(task_id)
            if lease is None:
                raise NotFoundError(f"unknown task {task_id}")
            if lease.response is not None:
                if lease.body_hash == body_hash:
                    return lease.response  # idempotent retry
                raise ConflictError("task already answered with a different body")
            if lease.expires <= self.clock():
                raise ConflictError("lease expired")
            inst = self.state.instances[lease.instance_id]
            if inst.status != ACTIVE or inst.current_round != lease.round:
                raise ConflictError(f"instance {inst.instance_id} is not answerable")
            if kind == "clicks":
                if not clicks:
                    raise InvalidAnswerError("clicks answer without clicks")
                if len(clicks) > self.state.config.clicks_per_round:
                    raise InvalidAnswerError(
                        f"{len(clicks)} clicks exceed the "
                        f"{self.state.config.clicks_per_round}-click limit"
                    )
                outer = self.state.config.geometry[1]
                for c in clicks:
                    if not (0 <= c["x"] < outer and 0 <= c["y"] < outer):
                        raise InvalidAnswerError(
                            f"click ({c['x']}, {c['y']}) outside the canvas"
                        )
            elif clicks:
                raise InvalidAnswerError(f"{kind} answers must not carry clicks")
            answer = AnswerRecord(
                kind=kind,
                clicks=[
                    Click(
                        x=float(c["x"]),
                        y=float(c["y"]),
                        polarity=str(c["polarity"]),
                        round=lease.round,
                        t_ms=int(c.get("t_ms", 0)),
                    )
                    for c in clicks
                ],
                annotator=lease.annotator,
                duration_ms=duration_ms,
            )
            self._append(answer_event(inst.instance_id, lease.round, answer))
            result = {
                "status": inst.status,
                "instance_id": inst.instance_id,
                "round": lease.round,
            }
            if kind == "clicks" and self.state.config.immediate_refine:
                try:
                    rle = self._refine(inst, lease.round)
                    self._append(
                        mask_event(inst.instance_id, lease.round, rle, self.state.config.refiner)
                    )
                    result["mask"] = rle.to_json()
                    result["status"] = inst.status
                except (RefineError, ValueError) as exc:
                    result["refine_error"] = str(exc)
            lease.response = result
            lease.body_hash = body_hash
            self._by_instance.pop(inst.instance_id, None)
            return result

    # ------------------------------------------------------------------
    # retrieval

    def get_mask(self, instance_id: str, round_index: Optional[int] = None) -> RleMask:
        with self._lock:
            inst = self.state.instances.get(instance_id)
            if inst is None:
                raise NotFoundError(f"unknown instance {instance_id}")
            if inst.status == "skipped":
                raise NotFoundError(f"instance {instance_id} was skipped; no mask exists")
            if round_index is None:
                mask = inst.final_mask
                if mask is None:
                    raise NotFoundError(f"instance {instance_id} has no mask yet")
                return mask
            if round_index not in inst.masks:
                raise NotFoundError(f"no round {round_index} mask for {instance_id}")
            return inst.masks[round_index]

    def crop_png(self, instance_id: str) -> bytes:
        with self._lock:
            inst = self.state.instances.get(instance_id)
            if inst is None:
                raise NotFoundError(f"unknown instance {instance_id}")
            crop = self._crop(inst)
        buf = io.BytesIO()
        Image.fromarray((np.asarray(crop) * 255).astype(np.uint8)).save(buf, format="PNG")
        return buf.getvalue()

    def summary(self) -> dict:
        with self._lock:
            counts: Dict[str, int] = {}
            for inst in self.state.instances.values():
                counts[inst.status] = counts.get(inst.status, 0) + 1
            pending = sum(
                1 for i in self.state.instances.values() if i.pending_refine_round is not None
            )
            return {
                "instances": len(self.state.instances),
                "status_counts": counts,
                "pending_refine": pending,
                "rounds": self.state.config.rounds,
                "clicks_per_round": self.state.config.clicks_per_round,
                "profile": self.state.config.profile,
                "refiner": self.state.config.refiner,
            }
