"""Campaign state: instances, rounds, the append-only event log, and replay.

Everything that happens to an instance is an event. The JSON-lines log is
the source of truth: masks are embedded in mask events, so replaying a log
reconstructs every instance state (including masks) with no refiner in the
loop. Sequence numbers are contiguous from 1; a gap means corruption.

Round semantics: rounds count 1..R; the round-0 mask is the zero-click
starting mask. An answer with clicks leaves the instance waiting for
refinement; a zero-clicks answer accepts the current mask; skip marks that
no mask should exist. Terminal statuses (accepted / skipped / exhausted)
are absorbing.
"""

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from .annotator import AnnotatorModel, Click
from .geometry import PROFILES, ClickEncoding, make_transform
from .masks import Box, RleMask
from .refiners import INITIAL_FOR, REFINER_KINDS

ACTIVE = "active"
ACCEPTED = "accepted"
SKIPPED = "skipped"
EXHAUSTED = "exhausted"
ANSWER_KINDS = ("clicks", "zero_clicks", "skip")


class LogCorruptionError(Exception):
    """The event log is missing records or violates the state machine."""


def resolve_profile(profile: str):
    """Named profile or explicit "inner:outer" -> (inner, outer)."""
    if profile in PROFILES:
        return PROFILES[profile]
    if ":" in profile:
        inner, outer = (int(v) for v in profile.split(":", 1))
        return inner, outer
    raise ValueError(f"unknown geometry profile: {profile}")


@dataclass(frozen=True)
class CampaignConfig:
    rounds: int = 3
    clicks_per_round: int = 4
    profile: str = "mini"
    refiner: str = "geodesic-click"
    refiner_params: dict = field(default_factory=dict)
    initial_refiner: Optional[str] = None
    initial_params: dict = field(default_factory=dict)
    annotator: AnnotatorModel = AnnotatorModel()
    encoding: ClickEncoding = ClickEncoding()
    seed: int = 0
    box_sigma: float = 0.0
    box_min_iou: float = 0.7
    immediate_refine: bool = False
    lease_seconds: float = 120.0

    def __post_init__(self):
        if self.rounds < 1 or self.clicks_per_round < 1:
            raise ValueError("rounds and clicks_per_round must be >= 1")
        if self.refiner not in REFINER_KINDS:
            raise ValueError(f"unknown refiner: {self.refiner}")
        resolve_profile(self.profile)

    @property
    def geometry(self):
        return resolve_profile(self.profile)

    @property
    def initial_kind(self) -> str:
        return self.initial_refiner or INITIAL_FOR[self.refiner]

    def params_for(self, kind: str) -> dict:
        """Constructor params for one refiner role (round vs initial)."""
        if kind == self.refiner:
            return dict(self.refiner_params)
        return dict(self.initial_params)

    def to_json(self) -> dict:
        return {
            "rounds": self.rounds,
            "clicks_per_round": self.clicks_per_round,
            "profile": self.profile,
            "refiner": self.refiner,
            "refiner_params": self.refiner_params,
            "initial_refiner": self.initial_refiner,
            "initial_params": self.initial_params,
            "annotator": self.annotator.to_json(),
            "encoding": self.encoding.to_json(),
            "seed": self.seed,
            "box_sigma": self.box_sigma,
            "box_min_iou": self.box_min_iou,
            "immediate_refine": self.immediate_refine,
            "lease_seconds": self.lease_seconds,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CampaignConfig":
        obj = dict(obj)
        if "annotator" in obj:
            obj["annotator"] = AnnotatorModel.from_json(obj["annotator"])
        if "encoding" in obj:
            obj["encoding"] = ClickEncoding.from_json(obj["encoding"])
        return cls(**obj)


@dataclass
class AnswerRecord:
    kind: str
    clicks: List[Click] = field(default_factory=list)
    region_areas: Optional[List[int]] = None
    annotator: str = "sim"
    duration_ms: int = 0

    def to_json(self) -> dict:
        return {
            "type": self.kind,
            "clicks": [c.to_json() for c in self.clicks],
            "areas": self.region_areas,
            "annotator": self.annotator,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnswerRecord":
        return cls(
            kind=str(obj["type"]),
            clicks=[Click.from_json(c) for c in obj.get("clicks", [])],
            region_areas=obj.get("areas"),
            annotator=str(obj.get("annotator", "sim")),
            duration_ms=int(obj.get("duration_ms", 0)),
        )


@dataclass
class InstanceState:
    """Per-instance campaign record, reconstructed purely from the log."""

    instance_id: str
    class_label: str
    image_ref: str
    width: int
    height: int
    box: Box
    gt: Optional[RleMask] = None
    masks: Dict[int, RleMask] = field(default_factory=dict)
    answers: Dict[int, AnswerRecord] = field(default_factory=dict)
    status: str = ACTIVE

    @property
    def last_mask_round(self) -> Optional[int]:
        return max(self.masks) if self.masks else None

    @property
    def current_round(self) -> Optional[int]:
        """The round currently open for an answer; None when not answerable."""
        if self.status != ACTIVE or not self.masks:
            return None
        nxt = self.last_mask_round + 1
        if nxt in self.answers:  # answered, waiting for refinement
            return None
        return nxt

    @property
    def pending_refine_round(self) -> Optional[int]:
        if self.status in (ACCEPTED, SKIPPED):
            return None
        if not self.masks:
            return 0
        nxt = self.last_mask_round + 1
        if nxt in self.answers and self.answers[nxt].kind == "clicks":
            return nxt
        return None

    @property
    def final_mask(self) -> Optional[RleMask]:
        if self.status == SKIPPED or not self.masks:
            return None
        return self.masks[self.last_mask_round]

    def clicks_through(self, round_index: int) -> List[Click]:
        out: List[Click] = []
        for r in sorted(self.answers):
            if r <= round_index:
                out.extend(self.answers[r].clicks)
        return out

    def cumulative_clicks(self, round_index: int) -> int:
        return len(self.clicks_through(round_index))

    def transform(self, inner: int, outer: int):
        return make_transform(self.box, self.width, self.height, inner, outer)


@dataclass
class CampaignState:
    config: CampaignConfig
    instances: Dict[str, InstanceState] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# events


def config_event(config: CampaignConfig) -> dict:
    return {"kind": "config", "instance": None, "round": None, "data": config.to_json()}


def import_event(
    instance_id: str,
    class_label: str,
    image_ref: str,
    width: int,
    height: int,
    box: Box,
    gt: Optional[RleMask],
) -> dict:
    return {
        "kind": "import",
        "instance": instance_id,
        "round": None,
        "data": {
            "class": class_label,
            "image_ref": image_ref,
            "width": width,
            "height": height,
            "box": [box.x, box.y, box.w, box.h],
            "gt_rle": gt.to_json() if gt is not None else None,
        },
    }


def mask_event(instance_id: str, round_index: int, rle: RleMask, refiner: str) -> dict:
    return {
        "kind": "mask",
        "instance": instance_id,
        "round": round_index,
        "data": {"rle": rle.to_json(), "refiner": refiner},
    }


def answer_event(instance_id: str, round_index: int, answer: AnswerRecord) -> dict:
    return {
        "kind": "answer",
        "instance": instance_id,
        "round": round_index,
        "data": answer.to_json(),
    }


def lease_event(instance_id: str, round_index: int, task_id: str, annotator: str, expires: float) -> dict:
    return {
        "kind": "lease",
        "instance": instance_id,
        "round": round_index,
        "data": {"task_id": task_id, "annotator": annotator, "expires": expires},
    }


class EventLog:
    """Append-only JSONL event store, optionally fsync'd per append.

    With no path the log accumulates in memory (simulation runs write it out
    in one pass at the end).
    """

    def __init__(self, path=None, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.records: List[dict] = []
        self._fh = None
        if self.path is not None:
            if self.path.exists():
                self.records = list(read_log(self.path))
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def next_seq(self) -> int:
        return len(self.records) + 1

    def append(self, event: dict) -> dict:
        record = dict(event)
        record["seq"] = self.next_seq
        record.setdefault("ts", time.time())
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        return record

    def extend(self, events: Iterable[dict]):
        for e in events:
            self.append(e)

    def write_to(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_log(path) -> List[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def apply_event(state: CampaignState, record: dict) -> None:
    kind = record["kind"]
    data = record.get("data", {})
    if kind == "config":
        state.config = CampaignConfig.from_json(data)
        return
    if kind == "lease":
        return  # leases are transient; logged for audit only
    iid = record["instance"]
    if kind == "import":
        if iid in state.instances:
            raise LogCorruptionError(f"duplicate import for {iid}")
        x, y, w, h = data["box"]
        state.instances[iid] = InstanceState(
            instance_id=iid,
            class_label=data["class"],
            image_ref=data["image_ref"],
            width=int(data["width"]),
            height=int(data["height"]),
            box=Box(x, y, w, h),
            gt=RleMask.from_json(data["gt_rle"]) if data.get("gt_rle") else None,
        )
        return
    if iid not in state.instances:
        raise LogCorruptionError(f"event for unknown instance {iid}")
    inst = state.instances[iid]
    rnd = record["round"]
    if kind == "answer":
        if inst.status != ACTIVE:
            raise LogCorruptionError(f"answer for terminal instance {iid}")
        if rnd != inst.current_round:
            raise LogCorruptionError(
                f"answer for round {rnd}, expected {inst.current_round} on {iid}"
            )
        answer = AnswerRecord.from_json(data)
        if answer.kind == "clicks" and len(answer.clicks) > state.config.clicks_per_round:
            raise LogCorruptionError(f"too many clicks in answer for {iid}")
        inst.answers[rnd] = answer
        if answer.kind == "zero_clicks":
            inst.status = ACCEPTED
        elif answer.kind == "skip":
            inst.status = SKIPPED
        return
    if kind == "mask":
        if inst.status != ACTIVE:
            raise LogCorruptionError(f"mask for terminal instance {iid}")
        if rnd != (0 if not inst.masks else inst.last_mask_round + 1):
            raise LogCorruptionError(f"mask for unexpected round {rnd} on {iid}")
        inst.masks[rnd] = RleMask.from_json(data["rle"])
        if rnd >= state.config.rounds:
            inst.status = EXHAUSTED
        return
    raise LogCorruptionError(f"unknown event kind: {kind}")


def replay(records: Iterable[dict]) -> CampaignState:
    """Fold a log back into campaign state, validating sequence contiguity."""
    state = CampaignState(config=CampaignConfig())
    expected = 1
    saw_config = False
    for record in records:
        if record.get("seq") != expected:
            raise LogCorruptionError(
                f"sequence gap: expected {expected}, found {record.get('seq')}"
            )
        expected += 1
        if record["kind"] == "config":
            saw_config = True
        elif not saw_config:
            raise LogCorruptionError("log does not start with a config event")
        apply_event(state, record)
    return state


def replay_file(path) -> CampaignState:
    return replay(read_log(path))
