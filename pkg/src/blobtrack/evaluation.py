"""Precision/recall scoring against labelled events, and frame rendering.

Scores are sampled on a fixed cadence (default 5 ms).  At each sample
time the ground-truth objects are located from their labelled events in
a half-cadence window, the reported set is the valid tracks alive at
that time, and a greedy nearest-first one-to-one matching within the
match radius yields true/false track counts, precision, and recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .engine import REC_TERMINATE, TERMINATED, VALID
from .events import EventArray

METRICS_CSV_HEADER = "t_us,true_tracks,false_tracks,matched_gt,total_gt,precision,recall"


@dataclass
class MetricsReport:
    rows: np.ndarray  # (n, 7): t_us, true, false, matched_gt, total_gt, prec, rec
    aggregates: Dict[str, float] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(METRICS_CSV_HEADER + "\n")
            for r in self.rows:
                f.write(
                    f"{int(r[0])},{int(r[1])},{int(r[2])},{int(r[3])},{int(r[4])},"
                    f"{_fmt(r[5])},{_fmt(r[6])}\n"
                )

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.aggregates, f, indent=2)
            f.write("\n")


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"


class TrackIndex:
    """Per-track time-sorted record index for state lookups."""

    def __init__(self, records: np.ndarray):
        records = records[records[:, 0].argsort(kind="stable")]
        self.tracks: Dict[int, np.ndarray] = {}
        ids = records[:, 1].astype(np.int64)
        for tid in np.unique(ids):
            self.tracks[int(tid)] = records[ids == tid]

    def states_at(self, t_us: int) -> Dict[int, np.ndarray]:
        """Latest record per track alive at time t (terminated excluded)."""
        out = {}
        for tid, rows in self.tracks.items():
            i = int(np.searchsorted(rows[:, 0], t_us, side="right")) - 1
            if i < 0:
                continue
            row = rows[i]
            if int(row[3]) == TERMINATED or int(row[2]) == REC_TERMINATE:
                continue
            out[tid] = row
        return out


def score(
    records: np.ndarray,
    labeled_events: EventArray,
    match_radius: float = 5.0,
    cadence_us: int = 5000,
) -> MetricsReport:
    """Sampled precision/recall of valid tracks against labelled events."""
    if labeled_events.label is None:
        raise ValueError("ground truth requires a labelled event stream")
    if len(records) == 0 or len(labeled_events) == 0:
        raise ValueError("empty input")
    t_lo = max(int(records[:, 0].min()), int(labeled_events.t.min()))
    t_hi = min(int(records[:, 0].max()), int(labeled_events.t.max()))
    if t_lo > t_hi:
        raise ValueError("records and ground truth cover disjoint time ranges")

    half = cadence_us // 2
    ev_t = labeled_events.t
    ev_lab = labeled_events.label
    index = TrackIndex(records)

    rows = []
    first = int(np.ceil(t_lo / cadence_us)) * cadence_us
    for t in range(first, t_hi + 1, cadence_us):
        lo = np.searchsorted(ev_t, t - half, side="left")
        hi = np.searchsorted(ev_t, t + half, side="right")
        labs = ev_lab[lo:hi]
        obj = {}
        for lab in np.unique(labs):
            if lab == 0:
                continue
            sel = labs == lab
            obj[int(lab)] = (
                float(labeled_events.x[lo:hi][sel].mean()),
                float(labeled_events.y[lo:hi][sel].mean()),
            )

        tracks = {
            tid: (row[4], row[5])
            for tid, row in index.states_at(t).items()
            if int(row[3]) == VALID
        }

        matches = _greedy_match(tracks, obj, match_radius)
        n_id = len(tracks)
        n_gt = len(obj)
        true_tracks = len(matches)
        false_tracks = n_id - true_tracks
        if n_id == 0:
            precision = 1.0 if n_gt == 0 else np.nan
        else:
            precision = true_tracks / n_id
        recall = np.nan if n_gt == 0 else true_tracks / n_gt
        rows.append([t, true_tracks, false_tracks, true_tracks, n_gt, precision, recall])

    rows = np.array(rows, dtype=np.float64).reshape(-1, 7)
    agg = {}
    for name, col in (
        ("true_tracks", 1),
        ("false_tracks", 2),
        ("precision", 5),
        ("recall", 6),
    ):
        vals = rows[:, col]
        vals = vals[~np.isnan(vals)]
        agg[f"{name}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        agg[f"{name}_std"] = float(vals.std()) if len(vals) else float("nan")
    agg["samples"] = int(len(rows))
    return MetricsReport(rows=rows, aggregates=agg)


def _greedy_match(tracks: Dict[int, tuple], objects: Dict[int, tuple], radius: float):
    """One-to-one nearest-first matching within the radius."""
    pairs = []
    for tid, (tx, ty) in tracks.items():
        for lab, (ox, oy) in objects.items():
            d = np.hypot(tx - ox, ty - oy)
            if d <= radius:
                pairs.append((d, tid, lab))
    pairs.sort()
    used_t, used_o = set(), set()
    matches = []
    for d, tid, lab in pairs:
        if tid in used_t or lab in used_o:
            continue
        used_t.add(tid)
        used_o.add(lab)
        matches.append((tid, lab))
    return matches


def render(
    events: EventArray,
    records: np.ndarray,
    out_dir,
    frame_period_us: int = 10000,
) -> List[Path]:
    """Accumulate events into frames with track-ellipse overlays (PNG)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    duration = int(events.t.max()) + 1 if len(events) else 0
    n_frames = max(1, -(-duration // frame_period_us))
    index = TrackIndex(records) if len(records) else None
    paths = []
    for k in range(n_frames):
        t0, t1 = k * frame_period_us, (k + 1) * frame_period_us
        lo = np.searchsorted(events.t, t0)
        hi = np.searchsorted(events.t, t1)
        img = np.full((events.height, events.width, 3), 1.0)
        xs, ys, ps = events.x[lo:hi], events.y[lo:hi], events.polarity[lo:hi]
        img[ys[ps > 0], xs[ps > 0]] = (0.85, 0.2, 0.2)
        img[ys[ps < 0], xs[ps < 0]] = (0.2, 0.2, 0.85)

        fig, ax = plt.subplots(figsize=(events.width / 100, events.height / 100), dpi=100)
        ax.imshow(img, interpolation="nearest")
        if index is not None:
            for tid, row in index.states_at(t1).items():
                valid = int(row[3]) == VALID
                color = "green" if valid else "orange"
                px, py, theta = row[4], row[5], row[8]
                l1, l2 = row[10], row[11]
                ax.add_patch(
                    Ellipse(
                        (px, py), 4 * l1, 4 * l2, angle=np.degrees(theta),
                        fill=False, color=color,
                        linestyle="-" if valid else "--",
                    )
                )
                ax.annotate(str(tid), (px + 2, py - 2), color=color, fontsize=6)
        ax.set_xlim(-0.5, events.width - 0.5)
        ax.set_ylim(events.height - 0.5, -0.5)
        ax.axis("off")
        path = out_dir / f"frame_{k:05d}.png"
        fig.savefig(path, bbox_inches="tight", pad_inches=0)
        plt.close(fig)
        paths.append(path)
    return paths
