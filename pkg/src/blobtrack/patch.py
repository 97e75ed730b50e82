"""Track-centred 28x28 decayed intensity patches.

Associated events accumulate signed polarity into a patch centred on the
track position, with all cells decaying exponentially between events.
Decay is applied lazily through a running scale factor so per-event cost
is one cell write; the factor is folded into the cells before it
underflows, which keeps the scheme exact.
"""

from __future__ import annotations

import numpy as np
from numba import njit

PATCH_SIZE = 28
_CENTER = (PATCH_SIZE / 2.0) - 0.5  # 13.5: offset added before round-half-up
_RENORM_FLOOR = 1e-120


@njit(cache=True)
def _patch_add_kernel(
    cells: np.ndarray,
    scale_state: np.ndarray,  # (scale, last_t_us, event_count)
    ex: float,
    ey: float,
    sigma: float,
    t_us: int,
    px: float,
    py: float,
    rho: float,
) -> int:
    """Add one event; returns 0 on success, 1 on time regression."""
    last_t = scale_state[1]
    if last_t >= 0 and t_us < last_t:
        return 1
    if last_t >= 0:
        dt = (t_us - last_t) * 1e-6
        scale_state[0] *= np.exp(-rho * dt)
    scale_state[1] = t_us
    if scale_state[0] < _RENORM_FLOOR:
        f = scale_state[0]
        for i in range(PATCH_SIZE):
            for j in range(PATCH_SIZE):
                cells[i, j] *= f
        scale_state[0] = 1.0
    # round-half-up of the centred offset
    col = int(np.floor(ex - px + _CENTER + 0.5))
    row = int(np.floor(ey - py + _CENTER + 0.5))
    if 0 <= row < PATCH_SIZE and 0 <= col < PATCH_SIZE:
        cells[row, col] += sigma / scale_state[0]
        scale_state[2] += 1.0
    return 0


@njit(cache=True)
def _patch_normalize_kernel(cells: np.ndarray, out: np.ndarray) -> None:
    """Map cells to [0, 1]: 0.5 + 0.5 * cell / max|cell|, row-major."""
    m = 1e-6
    for i in range(PATCH_SIZE):
        for j in range(PATCH_SIZE):
            a = abs(cells[i, j])
            if a > m:
                m = a
    k = 0
    for i in range(PATCH_SIZE):
        for j in range(PATCH_SIZE):
            v = cells[i, j] / m
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            out[k] = 0.5 + 0.5 * v
            k += 1


class IntensityPatch:
    """Signed, exponentially decayed accumulation of a track's events."""

    def __init__(self, rho: float = 100.0):
        if rho <= 0:
            raise ValueError("decay rate must be positive")
        self.rho = rho
        self._cells = np.zeros((PATCH_SIZE, PATCH_SIZE))
        # scale factor, last-update time (us, -1 = never), event count
        self._state = np.array([1.0, -1.0, 0.0])

    @property
    def last_t_us(self) -> int:
        return int(self._state[1])

    @property
    def event_count(self) -> int:
        return int(self._state[2])

    def cells(self) -> np.ndarray:
        """Decay-corrected cell values at the last update time."""
        return self._cells * self._state[0]

    def add_event(self, event, blob_position) -> None:
        status = _patch_add_kernel(
            self._cells,
            self._state,
            float(event.x),
            float(event.y),
            float(event.polarity),
            int(event.t),
            float(blob_position[0]),
            float(blob_position[1]),
            self.rho,
        )
        if status != 0:
            raise ValueError(
                f"event time {event.t} precedes patch time {self.last_t_us}"
            )

    def to_classifier_input(self) -> np.ndarray:
        """Flattened 784-vector in [0, 1]; an empty patch maps to all 0.5."""
        out = np.empty(PATCH_SIZE * PATCH_SIZE)
        _patch_normalize_kernel(self.cells(), out)
        return out


def write_patch_csv(path, cells: np.ndarray) -> None:
    np.savetxt(path, cells, delimiter=",", fmt="%.9g")


def read_patch_csv(path) -> np.ndarray:
    cells = np.loadtxt(path, delimiter=",", ndmin=2)
    if cells.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"{path}: expected {PATCH_SIZE}x{PATCH_SIZE} grid, got {cells.shape}")
    return cells


def write_patch_pgm(path, cells: np.ndarray) -> None:
    out = np.empty(PATCH_SIZE * PATCH_SIZE)
    _patch_normalize_kernel(np.ascontiguousarray(cells, dtype=np.float64), out)
    img = (out.reshape(PATCH_SIZE, PATCH_SIZE) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (PATCH_SIZE, PATCH_SIZE))
        f.write(img.tobytes())
