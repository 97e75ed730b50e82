"""Compiled single-pass event engine.

The pipeline state machine (association, EKF dispatch, detection, patch
batching, classification verdicts, housekeeping) runs inside one numba
kernel so per-event cost stays in the microsecond range.  Track state
lives in preallocated column arrays owned by the manager; the kernel
reuses the same compiled primitives as the per-module Python APIs.

The kernel processes a chunk of events and returns early with a resume
code when an output buffer fills or track capacity is exhausted.  All
capacity checks happen before any state mutation for an event, so
resuming at the returned index is exact.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .aeb_filter import UPDATE_OK, _predict_kernel, _update_kernel
from .blob_model import (
    IX_DX, IX_DY, IX_L1, IX_L2, IX_PX, IX_PY, IX_Q, IX_TH, IX_VX, IX_VY,
    STATE_DIM, _shape_matrix_inv, _wrap_theta,
)
from .classifier import _mlp_forward_kernel
from .detector import _detect_kernel
from .patch import PATCH_SIZE, _patch_add_kernel, _patch_normalize_kernel

# status codes for track slots
FREE = 0
CANDIDATE = 1
VALID = 2
TERMINATED = 3  # only appears in output records

# record kinds
REC_SAMPLE = 0
REC_SPAWN = 1
REC_PROMOTE = 2
REC_TERMINATE = 3

REC_WIDTH = 16  # t, id, kind, status, state(10), cov_trace(pos), event_count
SNAP_META = 4  # t, track id, dominant label, purity
SNAP_WIDTH = SNAP_META + PATCH_SIZE * PATCH_SIZE

# chunk return codes
DONE = 0
RECORDS_FULL = 1
TRACKS_FULL = 2
SNAPSHOTS_FULL = 3
BAD_ORDER = 4
OUT_OF_BOUNDS = 5

# misc scalar slots
M_NEXT_ID = 0
M_NEXT_SAMPLE = 1
M_LAST_T = 2
M_N_SLOTS = 3
MISC_LEN = 4

EMA_SMOOTHING = 0.05


@njit(cache=True)
def _emit_record(rec, rec_n, t, tid, kind, status, state, cov, n_assoc):
    i = rec_n[0]
    rec[i, 0] = t
    rec[i, 1] = tid
    rec[i, 2] = kind
    rec[i, 3] = status
    for j in range(STATE_DIM):
        rec[i, 4 + j] = state[j]
    rec[i, 14] = cov[0, 0] + cov[1, 1]
    rec[i, 15] = n_assoc
    rec_n[0] = i + 1


@njit(cache=True)
def _eval_push(eval_buf, eval_len, eval_head, slot, value):
    eval_buf[slot, eval_head[slot]] = value
    eval_head[slot] = (eval_head[slot] + 1) % eval_buf.shape[1]
    if eval_len[slot] < eval_buf.shape[1]:
        eval_len[slot] += 1


@njit(cache=True)
def _eval_verdict(eval_buf, eval_len, slot):
    size = eval_buf.shape[1]
    if eval_len[slot] < size:
        return 0  # continue
    total = 0
    for j in range(size):
        total += eval_buf[slot, j]
    if total == size:
        return 1  # promote
    if total == 0:
        return 2  # terminate
    return 0


@njit(cache=True)
def process_chunk(
    # event chunk
    ev_t, ev_x, ev_y, ev_p, ev_label,
    # shared surfaces
    surface_t, field_vx, field_vy, field_t,
    # track columns
    status, track_id, state, cov, t_last, last_assoc, ema_interval,
    assoc_count, batch_count, created,
    buf_win, buf_count, buf_head,
    eval_buf, eval_len, eval_head,
    patch_cells, patch_state, label_counts,
    # outputs
    rec, rec_n, snap, snap_n,
    misc,
    # model
    w1, b1, w2, b2, w3, b3,
    # geometry / filter / manager parameters
    width, height, n_window, q_diag, p0_diag, spawn_lam1, spawn_lam2, spawn_delta_mag,
    gate_d2, g_target_scale,
    kappa, batch_size, sample_period_us, suppression_radius,
    # flow / detector parameters
    radius, alpha, delta_max, min_neighbors,
    gamma, s_default, s_min, s_max,
    rho,
    # modes
    use_classifier, harvest, max_tracks,
    nc_cov_trace_max, nc_s_min, nc_s_max, nc_lam_min, nc_lam_max,
    start_index,
):
    cap = status.shape[0]
    n_events = ev_t.shape[0]
    have_labels = ev_label.shape[0] == n_events
    n_labels = label_counts.shape[1]
    hits = np.empty(cap, dtype=np.int64)
    x_vec = np.empty(PATCH_SIZE * PATCH_SIZE)
    supp_sq = suppression_radius * suppression_radius

    i = start_index
    while i < n_events:
        t = ev_t[i]
        x = ev_x[i]
        y = ev_y[i]
        sig = float(ev_p[i])
        if t < misc[M_LAST_T]:
            return BAD_ORDER, i
        if x < 0 or x >= width or y < 0 or y >= height:
            return OUT_OF_BOUNDS, i

        n_slots = misc[M_N_SLOTS]
        n_live = 0
        for slot in range(n_slots):
            if status[slot] != FREE:
                n_live += 1

        # periodic per-track samples due before this event
        while misc[M_NEXT_SAMPLE] <= t:
            if rec_n[0] + n_live > rec.shape[0]:
                return RECORDS_FULL, i
            ts = misc[M_NEXT_SAMPLE]
            for slot in range(n_slots):
                if status[slot] != FREE:
                    _emit_record(
                        rec, rec_n, ts, track_id[slot], REC_SAMPLE, status[slot],
                        state[slot], cov[slot], assoc_count[slot],
                    )
            misc[M_NEXT_SAMPLE] += sample_period_us

        # worst case this event: spawn/promote + housekeeping terminations
        if rec_n[0] + n_live + 2 > rec.shape[0]:
            return RECORDS_FULL, i
        if snap_n[0] + 1 > snap.shape[0]:
            return SNAPSHOTS_FULL, i

        surface_t[y, x] = t

        # association: valid tracks take priority over candidates
        n_hit = 0
        for slot in range(n_slots):
            if status[slot] != VALID:
                continue
            if _gates(state[slot], t_last[slot], t, x, y, sig, gate_d2):
                hits[n_hit] = slot
                n_hit += 1
        if n_hit == 0:
            for slot in range(n_slots):
                if status[slot] != CANDIDATE:
                    continue
                if _gates(state[slot], t_last[slot], t, x, y, sig, gate_d2):
                    hits[n_hit] = slot
                    n_hit += 1

        if n_hit == 1:
            slot = hits[0]
            dt = (t - t_last[slot]) * 1e-6
            _predict_kernel(state[slot], cov[slot], dt, q_diag)
            t_last[slot] = t
            st, buf_count[slot], buf_head[slot] = _update_kernel(
                state[slot], cov[slot], float(x), float(y), sig,
                buf_win[slot],
                buf_count[slot], buf_head[slot], n_window, g_target_scale,
            )
            if st != UPDATE_OK:
                _emit_record(
                    rec, rec_n, t, track_id[slot], REC_TERMINATE, TERMINATED,
                    state[slot], cov[slot], assoc_count[slot],
                )
                status[slot] = FREE
            else:
                _patch_add_kernel(
                    patch_cells[slot], patch_state[slot],
                    float(x), float(y), sig, t,
                    state[slot, IX_PX], state[slot, IX_PY], rho,
                )
                if assoc_count[slot] > 0:
                    gap = (t - last_assoc[slot]) * 1e-6
                    if ema_interval[slot] == 0.0:
                        ema_interval[slot] = gap
                    else:
                        ema_interval[slot] = (
                            (1.0 - EMA_SMOOTHING) * ema_interval[slot] + EMA_SMOOTHING * gap
                        )
                last_assoc[slot] = t
                assoc_count[slot] += 1
                batch_count[slot] += 1
                if have_labels:
                    lab = int(ev_label[i])
                    if lab < n_labels:
                        label_counts[slot, lab] += 1

                if batch_count[slot] >= batch_size:
                    batch_count[slot] = 0
                    if harvest:
                        total = 0
                        best = 0
                        best_count = 0
                        for lab in range(n_labels):
                            c = label_counts[slot, lab]
                            total += c
                            if lab >= 1 and c > best_count:
                                best_count = c
                                best = lab
                        j = snap_n[0]
                        snap[j, 0] = t
                        snap[j, 1] = track_id[slot]
                        snap[j, 2] = best
                        snap[j, 3] = best_count / total if total > 0 else 0.0
                        scale = patch_state[slot, 0]
                        k = SNAP_META
                        for r in range(PATCH_SIZE):
                            for c2 in range(PATCH_SIZE):
                                snap[j, k] = patch_cells[slot, r, c2] * scale
                                k += 1
                        snap_n[0] = j + 1
                    if use_classifier:
                        scale = patch_state[slot, 0]
                        k = 0
                        for r in range(PATCH_SIZE):
                            for c2 in range(PATCH_SIZE):
                                x_vec[k] = patch_cells[slot, r, c2] * scale
                                k += 1
                        # in-place normalization: max pass precedes writes
                        _patch_normalize_kernel(
                            x_vec.reshape(PATCH_SIZE, PATCH_SIZE), x_vec
                        )
                        p = _mlp_forward_kernel(w1, b1, w2, b2, w3, b3, x_vec)
                        _eval_push(eval_buf, eval_len, eval_head, slot, 1 if p > 0.5 else 0)
                    else:
                        speed = math.hypot(state[slot, IX_VX], state[slot, IX_VY])
                        cov_tr = cov[slot, 0, 0] + cov[slot, 1, 1]
                        ok = (
                            cov_tr < nc_cov_trace_max
                            and nc_s_min <= speed <= nc_s_max
                            and nc_lam_min <= state[slot, IX_L1] <= nc_lam_max
                            and nc_lam_min <= state[slot, IX_L2] <= nc_lam_max
                        )
                        _eval_push(eval_buf, eval_len, eval_head, slot, 1 if ok else 0)
                    v = _eval_verdict(eval_buf, eval_len, slot)
                    if v == 1 and status[slot] == CANDIDATE:
                        status[slot] = VALID
                        _emit_record(
                            rec, rec_n, t, track_id[slot], REC_PROMOTE, VALID,
                            state[slot], cov[slot], assoc_count[slot],
                        )
                    elif v == 2:
                        _emit_record(
                            rec, rec_n, t, track_id[slot], REC_TERMINATE, TERMINATED,
                            state[slot], cov[slot], assoc_count[slot],
                        )
                        status[slot] = FREE
        elif n_hit > 1:
            # ambiguous source: forward-integrate all associated tracks only
            for j in range(n_hit):
                slot = hits[j]
                dt = (t - t_last[slot]) * 1e-6
                _predict_kernel(state[slot], cov[slot], dt, q_diag)
                t_last[slot] = t
                last_assoc[slot] = t
        else:
            hit, dir_x, dir_y, speed, _score = _detect_kernel(
                surface_t, field_vx, field_vy, field_t,
                x, y, t, radius, alpha, delta_max, min_neighbors,
                gamma, s_default, s_min, s_max,
            )
            if hit == 1:
                suppressed = False
                for slot in range(n_slots):
                    if status[slot] != FREE:
                        ddx = state[slot, IX_PX] - x
                        ddy = state[slot, IX_PY] - y
                        if ddx * ddx + ddy * ddy <= supp_sq:
                            suppressed = True
                            break
                if not suppressed and 0 < max_tracks <= n_live:
                    suppressed = True
                if not suppressed:
                    free_slot = -1
                    for slot in range(cap):
                        if status[slot] == FREE:
                            free_slot = slot
                            break
                    if free_slot < 0:
                        return TRACKS_FULL, i
                    slot = free_slot
                    if slot + 1 > misc[M_N_SLOTS]:
                        misc[M_N_SLOTS] = slot + 1
                    status[slot] = CANDIDATE
                    track_id[slot] = misc[M_NEXT_ID]
                    misc[M_NEXT_ID] += 1
                    state[slot, IX_PX] = x
                    state[slot, IX_PY] = y
                    state[slot, IX_VX] = speed * dir_x
                    state[slot, IX_VY] = speed * dir_y
                    state[slot, IX_TH] = _wrap_theta(math.atan2(dir_y, dir_x))
                    state[slot, IX_Q] = 0.0
                    state[slot, IX_L1] = spawn_lam1
                    state[slot, IX_L2] = spawn_lam2
                    state[slot, IX_DX] = spawn_delta_mag * dir_x
                    state[slot, IX_DY] = spawn_delta_mag * dir_y
                    for a in range(STATE_DIM):
                        for b in range(STATE_DIM):
                            cov[slot, a, b] = 0.0
                    for a in range(STATE_DIM):
                        cov[slot, a, a] = p0_diag[a]
                    t_last[slot] = t
                    last_assoc[slot] = t
                    created[slot] = t
                    ema_interval[slot] = 0.0
                    assoc_count[slot] = 1
                    batch_count[slot] = 1
                    buf_count[slot] = 0
                    buf_head[slot] = 0
                    eval_len[slot] = 0
                    eval_head[slot] = 0
                    for r in range(PATCH_SIZE):
                        for c2 in range(PATCH_SIZE):
                            patch_cells[slot, r, c2] = 0.0
                    patch_state[slot, 0] = 1.0
                    patch_state[slot, 1] = -1.0
                    patch_state[slot, 2] = 0.0
                    for lab in range(n_labels):
                        label_counts[slot, lab] = 0
                    _patch_add_kernel(
                        patch_cells[slot], patch_state[slot],
                        float(x), float(y), sig, t,
                        state[slot, IX_PX], state[slot, IX_PY], rho,
                    )
                    if have_labels:
                        lab = int(ev_label[i])
                        if lab < n_labels:
                            label_counts[slot, lab] += 1
                    _emit_record(
                        rec, rec_n, t, track_id[slot], REC_SPAWN, CANDIDATE,
                        state[slot], cov[slot], assoc_count[slot],
                    )

        # housekeeping: off-image and stale tracks
        n_slots = misc[M_N_SLOTS]
        top = -1
        for slot in range(n_slots):
            if status[slot] == FREE:
                continue
            px = state[slot, IX_PX]
            py = state[slot, IX_PY]
            kill = px < -2.0 or px > width + 1.0 or py < -2.0 or py > height + 1.0
            if not kill and ema_interval[slot] > 0.0:
                if (t - last_assoc[slot]) * 1e-6 > kappa * ema_interval[slot]:
                    kill = True
            if kill:
                _emit_record(
                    rec, rec_n, t, track_id[slot], REC_TERMINATE, TERMINATED,
                    state[slot], cov[slot], assoc_count[slot],
                )
                status[slot] = FREE
            else:
                top = slot
        misc[M_N_SLOTS] = top + 1

        misc[M_LAST_T] = t
        i += 1

    return DONE, n_events


@njit(cache=True)
def _gates(track_state, t_last, t, x, y, sig, gate_d2):
    """Squared Mahalanobis gate against the state projected to time t."""
    dt = (t - t_last) * 1e-6
    px = track_state[IX_PX] + track_state[IX_VX] * dt
    py = track_state[IX_PY] + track_state[IX_VY] * dt
    th = track_state[IX_TH] + track_state[IX_Q] * dt
    li = _shape_matrix_inv(th, track_state[IX_L1], track_state[IX_L2])
    r0 = x - px - sig * track_state[IX_DX]
    r1 = y - py - sig * track_state[IX_DY]
    u0 = li[0, 0] * r0 + li[0, 1] * r1
    u1 = li[1, 0] * r0 + li[1, 1] * r1
    return u0 * u0 + u1 * u1 <= gate_d2
