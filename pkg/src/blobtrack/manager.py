"""Pipeline orchestration: data association, dispatch, and track lifecycle.

The :class:`TrackerPool` owns the shared surfaces and all per-track
state, and advances one event at a time (or in bulk) through the
compiled engine kernel: association against valid tracks first, then
candidates; single association drives an EKF update and the track's
intensity patch; ambiguous association forward-integrates all gating
tracks; unassociated events go to the detector and may spawn candidates.
Every 50 associated events a track is evaluated (classifier or threshold
rules) and the unanimity verdict promotes or terminates it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import aeb_filter, engine
from .classifier import EVAL_BUFFER_LEN, Mlp
from .config import PipelineConfig, default_config
from .engine import (
    CANDIDATE, FREE, REC_PROMOTE, REC_SAMPLE, REC_SPAWN, REC_TERMINATE,
    REC_WIDTH, SNAP_WIDTH, TERMINATED, VALID,
)
from .events import EventArray
from .patch import PATCH_SIZE

TRACK_CSV_HEADER = (
    "t_us,track_id,status,px,py,vx,vy,theta,q,l1,l2,dx,dy,cov_trace,event_count"
)

_STATUS_NAMES = {CANDIDATE: "candidate", VALID: "valid", TERMINATED: "terminated"}

_INITIAL_CAPACITY = 256
_RECORD_BUFFER = 1 << 18
_SNAP_BUFFER = 1 << 14


@dataclass
class TrackRecord:
    t: int
    track_id: int
    kind: int  # engine.REC_* constants
    status: int  # engine status code
    state: np.ndarray
    cov_trace: float
    event_count: int

    @property
    def status_name(self) -> str:
        return _STATUS_NAMES[self.status]


class TrackerPool:
    """Single-owner pipeline state machine over one event stream."""

    def __init__(
        self,
        width: int,
        height: int,
        config: Optional[PipelineConfig] = None,
        model: Optional[Mlp] = None,
        use_classifier: Optional[bool] = None,
        harvest: bool = False,
        track_labels: bool = False,
        max_label: int = 64,
    ):
        self.width = width
        self.height = height
        self.config = config or PipelineConfig.from_dict(default_config())
        self.model = model
        if use_classifier is None:
            use_classifier = model is not None
        if use_classifier and model is None:
            raise ValueError("classifier mode requires a model")
        self.use_classifier = use_classifier
        self.harvest = harvest
        self.track_labels = track_labels or harvest
        self.max_label = max_label

        self.surface_t = np.full((height, width), -1, dtype=np.int64)
        self.field_vx = np.zeros((height, width))
        self.field_vy = np.zeros((height, width))
        self.field_t = np.full((height, width), -1, dtype=np.int64)

        mgr = self.config.raw["manager"]
        self.eval_buffer_len = int(mgr["eval_buffer_len"])
        self._alloc_tracks(_INITIAL_CAPACITY)

        self.rec = np.empty((_RECORD_BUFFER, REC_WIDTH))
        self.rec_n = np.zeros(1, dtype=np.int64)
        self.snap = np.empty((_SNAP_BUFFER if harvest else 1, SNAP_WIDTH))
        self.snap_n = np.zeros(1, dtype=np.int64)
        self._flushed_records: List[np.ndarray] = []
        self._flushed_snaps: List[np.ndarray] = []

        self.misc = np.zeros(engine.MISC_LEN, dtype=np.int64)
        self.misc[engine.M_NEXT_ID] = 1
        self.misc[engine.M_NEXT_SAMPLE] = 0
        self.misc[engine.M_LAST_T] = 0

        if model is not None:
            self._weights = (model.w1, model.b1, model.w2, model.b2, model.w3, model.b3)
        else:
            z = np.zeros((1, 1))
            zb = np.zeros(1)
            self._weights = (z, zb, z, zb, z, zb)

        self.events_processed = 0

    def _alloc_tracks(self, cap: int) -> None:
        n = int(self.config.raw["filter"]["n"])
        n_labels = self.max_label + 1 if self.track_labels else 1
        self.status = np.zeros(cap, dtype=np.int8)
        self.track_id = np.zeros(cap, dtype=np.int64)
        self.state = np.zeros((cap, 10))
        self.cov = np.zeros((cap, 10, 10))
        self.t_last = np.zeros(cap, dtype=np.int64)
        self.last_assoc = np.zeros(cap, dtype=np.int64)
        self.ema_interval = np.zeros(cap)
        self.assoc_count = np.zeros(cap, dtype=np.int64)
        self.batch_count = np.zeros(cap, dtype=np.int64)
        self.created = np.zeros(cap, dtype=np.int64)
        self.buf_win = np.zeros((cap, n, 4))
        self.buf_count = np.zeros(cap, dtype=np.int64)
        self.buf_head = np.zeros(cap, dtype=np.int64)
        self.eval_buf = np.zeros((cap, self.eval_buffer_len), dtype=np.uint8)
        self.eval_len = np.zeros(cap, dtype=np.int64)
        self.eval_head = np.zeros(cap, dtype=np.int64)
        self.patch_cells = np.zeros((cap, PATCH_SIZE, PATCH_SIZE))
        self.patch_state = np.zeros((cap, 3))
        self.label_counts = np.zeros((cap, n_labels), dtype=np.int64)

    def _grow_tracks(self) -> None:
        old = self.__dict__.copy()
        cap = len(self.status) * 2
        self._alloc_tracks(cap)
        for name in (
            "status", "track_id", "state", "cov", "t_last", "last_assoc",
            "ema_interval", "assoc_count", "batch_count", "created",
            "buf_win", "buf_count", "buf_head",
            "eval_buf", "eval_len", "eval_head",
            "patch_cells", "patch_state", "label_counts",
        ):
            getattr(self, name)[: len(old[name])] = old[name]

    def process(self, events: EventArray) -> None:
        """Run the engine over a full event array."""
        cfg = self.config.raw
        mgr = cfg["manager"]
        nc = mgr["no_classifier"]
        flow = cfg["flow"]
        det = cfg["detector"]
        filt = cfg["filter"]
        w1, b1, w2, b2, w3, b3 = self._weights
        gate_d2 = -2.0 * np.log(1.0 - float(mgr["significance"]))

        labels = events.label if (self.track_labels and events.label is not None) else np.empty(0, dtype=np.uint32)
        start = 0
        while True:
            code, done = engine.process_chunk(
                events.t, events.x, events.y, events.polarity, labels,
                self.surface_t, self.field_vx, self.field_vy, self.field_t,
                self.status, self.track_id, self.state, self.cov,
                self.t_last, self.last_assoc, self.ema_interval,
                self.assoc_count, self.batch_count, self.created,
                self.buf_win, self.buf_count, self.buf_head,
                self.eval_buf, self.eval_len, self.eval_head,
                self.patch_cells, self.patch_state, self.label_counts,
                self.rec, self.rec_n, self.snap, self.snap_n,
                self.misc,
                w1, b1, w2, b2, w3, b3,
                self.width, self.height,
                int(filt["n"]), self.config.q_diag, self.config.p0_diag,
                float(filt["spawn_lam1"]), float(filt["spawn_lam2"]),
                float(filt["spawn_delta_mag"]),
                gate_d2, aeb_filter.gate_truncation_scale(gate_d2),
                float(mgr["kappa"]), int(mgr["batch_size"]),
                int(mgr["sample_period_us"]), float(det["suppression_radius"]),
                int(flow["patch_radius"]), float(flow["alpha"]),
                float(flow["delta_max"]), int(flow["min_neighbors"]),
                float(det["gamma"]), float(det["s_default"]),
                float(det["s_min"]), float(det["s_max"]),
                float(cfg["patch"]["rho"]),
                self.use_classifier, self.harvest, int(mgr["max_tracks"]),
                float(nc["cov_trace_max"]), float(nc["s_min"]), float(nc["s_max"]),
                float(nc["lam_min"]), float(nc["lam_max"]),
                start,
            )
            if code == engine.DONE:
                break
            if code == engine.RECORDS_FULL:
                self._flush_records()
            elif code == engine.SNAPSHOTS_FULL:
                self._flush_snaps()
            elif code == engine.TRACKS_FULL:
                self._grow_tracks()
            elif code == engine.BAD_ORDER:
                raise ValueError(
                    f"event {done}: timestamp {events.t[done]} precedes {self.misc[engine.M_LAST_T]}"
                )
            elif code == engine.OUT_OF_BOUNDS:
                raise ValueError(
                    f"event {done}: position ({events.x[done]}, {events.y[done]}) out of bounds"
                )
            start = done
        self.events_processed += len(events)

    def process_event(self, event, label: int = 0) -> List[TrackRecord]:
        """Advance the pipeline by one event; returns records it produced."""
        before = self._record_count()
        arr = EventArray(
            self.width, self.height,
            np.array([event.t], dtype=np.int64),
            np.array([event.x], dtype=np.int32),
            np.array([event.y], dtype=np.int32),
            np.array([event.polarity], dtype=np.int8),
            np.array([label], dtype=np.uint32),
        )
        self.process(arr)
        return self._decode(self.records()[before:])

    def _record_count(self) -> int:
        return sum(len(r) for r in self._flushed_records) + int(self.rec_n[0])

    def _flush_records(self) -> None:
        self._flushed_records.append(self.rec[: self.rec_n[0]].copy())
        self.rec_n[0] = 0

    def _flush_snaps(self) -> None:
        self._flushed_snaps.append(self.snap[: self.snap_n[0]].copy())
        self.snap_n[0] = 0

    def records(self) -> np.ndarray:
        """All records emitted so far, as a (n, 16) float array."""
        parts = self._flushed_records + [self.rec[: self.rec_n[0]]]
        return np.concatenate(parts) if parts else np.empty((0, REC_WIDTH))

    def snapshots(self) -> np.ndarray:
        parts = self._flushed_snaps + [self.snap[: self.snap_n[0]]]
        return np.concatenate(parts) if parts else np.empty((0, SNAP_WIDTH))

    @staticmethod
    def _decode(rows: np.ndarray) -> List[TrackRecord]:
        out = []
        for row in rows:
            out.append(
                TrackRecord(
                    t=int(row[0]),
                    track_id=int(row[1]),
                    kind=int(row[2]),
                    status=int(row[3]),
                    state=row[4:14].copy(),
                    cov_trace=float(row[14]),
                    event_count=int(row[15]),
                )
            )
        return out

    # introspection -----------------------------------------------------

    def live_slots(self) -> List[int]:
        return [i for i in range(len(self.status)) if self.status[i] != FREE]

    def live_track_ids(self) -> List[int]:
        return [int(self.track_id[i]) for i in self.live_slots()]

    def slot_of(self, track_id: int) -> int:
        for i in self.live_slots():
            if self.track_id[i] == track_id:
                return i
        raise KeyError(f"no live track {track_id}")

    def promote(self, track_id: int) -> None:
        """Force-promote a candidate; promoting a valid track is a no-op."""
        slot = self.slot_of(track_id)
        if self.status[slot] == CANDIDATE:
            self.status[slot] = VALID

    def housekeeping(self, t_us: int) -> List[int]:
        """Terminate off-image and stale tracks; returns terminated ids.

        The engine runs the identical checks after every event; this
        method exists for direct driving of the pool.
        """
        kappa = float(self.config.raw["manager"]["kappa"])
        terminated = []
        for slot in self.live_slots():
            px, py = self.state[slot, 0], self.state[slot, 1]
            kill = px < -2.0 or px > self.width + 1.0 or py < -2.0 or py > self.height + 1.0
            if not kill and self.ema_interval[slot] > 0.0:
                kill = (t_us - self.last_assoc[slot]) * 1e-6 > kappa * self.ema_interval[slot]
            if kill:
                terminated.append(int(self.track_id[slot]))
                self.status[slot] = FREE
        return terminated


def skip_early_snapshots(snaps: np.ndarray, skip: int) -> np.ndarray:
    """Drop each track's first ``skip`` snapshots.

    A candidate's first few patches accumulate only a handful of events and
    carry little shape information, so harvesting benefits from skipping them.
    """
    if skip <= 0 or len(snaps) == 0:
        return snaps
    seen: Dict[int, int] = {}
    keep = np.zeros(len(snaps), dtype=bool)
    for i, row in enumerate(snaps):
        tid = int(row[1])
        seen[tid] = seen.get(tid, 0) + 1
        keep[i] = seen[tid] > skip
    return snaps[keep]


def write_track_csv(path, records: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(TRACK_CSV_HEADER + "\n")
        for row in records:
            status = _STATUS_NAMES[int(row[3])]
            f.write(
                f"{int(row[0])},{int(row[1])},{status},"
                + ",".join(format(v, ".6f") for v in row[4:14])
                + f",{row[14]:.6f},{int(row[15])}\n"
            )


def read_track_csv(path):
    """Track CSV back to a (n, 16)-like array; kind is not recoverable, so
    sample/transition records are distinguished by status alone."""
    status_code = {"candidate": CANDIDATE, "valid": VALID, "terminated": TERMINATED}
    rows = []
    with open(path) as f:
        header = f.readline()
        if header.strip() != TRACK_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for line in f:
            parts = line.strip().split(",")
            rows.append(
                [float(parts[0]), float(parts[1]), -1.0, float(status_code[parts[2]])]
                + [float(v) for v in parts[3:]]
            )
    return np.array(rows).reshape(-1, REC_WIDTH)


def run_summary(records: np.ndarray, n_events: int, wall_seconds: float) -> Dict:
    """Aggregate counts and lifetime statistics for a run."""
    kinds = records[:, 2].astype(int) if len(records) else np.empty(0, dtype=int)
    spawned = records[kinds == REC_SPAWN] if len(records) else records
    promoted = records[kinds == REC_PROMOTE] if len(records) else records
    terminated = records[kinds == REC_TERMINATE] if len(records) else records
    lifetimes = []
    if len(records):
        born = {int(r[1]): r[0] for r in spawned}
        for r in terminated:
            tid = int(r[1])
            if tid in born:
                lifetimes.append((r[0] - born[tid]) * 1e-6)
    hist, edges = np.histogram(lifetimes, bins=[0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, np.inf])
    return {
        "events": int(n_events),
        "tracks_spawned": int(len(spawned)),
        "tracks_promoted": int(len(promoted)),
        "tracks_terminated": int(len(terminated)),
        "lifetime_histogram": {
            f"{edges[i]:g}-{edges[i + 1]:g}s": int(hist[i]) for i in range(len(hist))
        },
        "wall_seconds": wall_seconds,
        "events_per_second": n_events / wall_seconds if wall_seconds > 0 else 0.0,
    }


def run(
    events: EventArray,
    config: Optional[PipelineConfig] = None,
    model: Optional[Mlp] = None,
    use_classifier: Optional[bool] = None,
    track_labels: bool = False,
) -> tuple:
    """Process a whole stream; returns (records, summary, pool)."""
    pool = TrackerPool(
        events.width, events.height, config, model,
        use_classifier=use_classifier, track_labels=track_labels,
    )
    t0 = time.perf_counter()
    pool.process(events)
    wall = time.perf_counter() - t0
    records = pool.records()
    summary = run_summary(records, len(events), wall)
    return records, summary, pool


def write_summary(path, summary: Dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
