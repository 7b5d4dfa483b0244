"""Timestamping simulation, stream ring buffers, and label/window pairing.

A shared pulse-per-second epoch anchors both sensor clocks; each stream
adds its own fixed offset, drift and jitter. Pairing assigns every CSI
event the nearest teacher label within the configured tolerance, and
build_labeled_dataset turns frame-level pairs into fixed-length training
windows labeled from their final frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClockModel",
    "LabeledSample",
    "RingBuffer",
    "SyncConfig",
    "SyncedPair",
    "build_labeled_dataset",
    "pair_streams",
]

# default pairing tolerance: half the 30 Hz teacher frame interval. The
# hardware clock-alignment bound is a separate, much tighter knob.
DEFAULT_EPSILON_NS = int(1e9 / 30 / 2)


@dataclass
class ClockModel:
    """Per-stream timestamping: offset, linear drift and Gaussian jitter.

    stamp() maps a nominal event time to a measured timestamp
    t = nominal + offset + drift * (nominal - pps_epoch) + jitter and
    enforces strict monotonicity via max(prev + 1, t).
    """

    pps_epoch_ns: int
    offset_ns: int = 0
    jitter_std_ns: float = 0.0
    drift_ppm: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _prev: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.jitter_std_ns < 0:
            raise ValueError("jitter_std_ns must be >= 0")
        self._rng = np.random.default_rng(self.seed)
        self._prev = -(1 << 62)

    def stamp(self, nominal_ns: int) -> int:
        elapsed = nominal_ns - self.pps_epoch_ns
        t = nominal_ns + self.offset_ns + self.drift_ppm * 1e-6 * elapsed
        if self.jitter_std_ns > 0:
            t += self._rng.normal(0.0, self.jitter_std_ns)
        stamped = max(self._prev + 1, int(round(t)))
        self._prev = stamped
        return stamped

    def stamp_many(self, nominal_ns) -> np.ndarray:
        return np.array([self.stamp(int(t)) for t in nominal_ns], dtype=np.int64)


@dataclass(frozen=True)
class SyncConfig:
    """Pairing tolerance and acquisition buffer capacities."""

    epsilon_ns: int = DEFAULT_EPSILON_NS
    csi_buffer_capacity: int = 1 << 14
    label_buffer_capacity: int = 1 << 10

    def __post_init__(self):
        if self.epsilon_ns <= 0:
            raise ValueError("epsilon_ns must be > 0")


class RingBuffer:
    """Bounded FIFO that overwrites the oldest entry when full.

    Capacity must be a power of two. Stores references only (zero-copy);
    intended for one producer and one consumer. `overflow` counts
    overwritten entries.
    """

    def __init__(self, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self._mask = capacity - 1
        self._slots = [None] * capacity
        self._head = 0  # next write position (total writes)
        self._tail = 0  # next read position (total reads)
        self.overflow = 0

    def __len__(self) -> int:
        return self._head - self._tail

    def push(self, item) -> None:
        if len(self) == self.capacity:
            self._tail += 1
            self.overflow += 1
        self._slots[self._head & self._mask] = item
        self._head += 1

    def pop(self):
        if self._head == self._tail:
            raise IndexError("ring buffer is empty")
        item = self._slots[self._tail & self._mask]
        self._slots[self._tail & self._mask] = None
        self._tail += 1
        return item

    def drain(self) -> list:
        out = []
        while self._head != self._tail:
            out.append(self.pop())
        return out


@dataclass(frozen=True)
class SyncedPair:
    """One CSI event matched to a teacher label within the tolerance."""

    csi: object
    csi_timestamp_ns: int
    label: object
    label_timestamp_ns: int

    @property
    def delta_ns(self) -> int:
        return abs(self.csi_timestamp_ns - self.label_timestamp_ns)


@dataclass(frozen=True)
class LabeledSample:
    """Fixed-length feature window with the label of its final frame."""

    features: np.ndarray  # (window, d)
    label: int
    delta_ns: int


def _check_sorted(times: np.ndarray, name: str) -> None:
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValueError(f"{name} events must be sorted by timestamp")


def pair_streams(csi_events, label_events, config: SyncConfig):
    """Match each CSI event to its nearest label within epsilon.

    Both inputs are sequences of (timestamp_ns, payload) sorted by time.
    A label may serve many CSI events; CSI events with no label inside the
    tolerance are left unmatched, never mislabeled. Ties between an earlier
    and a later label break toward the earlier one.

    Returns (pairs, unmatched_csi_count).
    """
    csi_times = np.array([int(t) for t, _ in csi_events], dtype=np.int64)
    label_times = np.array([int(t) for t, _ in label_events], dtype=np.int64)
    _check_sorted(csi_times, "csi")
    _check_sorted(label_times, "label")
    if label_times.size == 0:
        return [], csi_times.size
    big = np.iinfo(np.int64).max // 4
    r = np.searchsorted(label_times, csi_times, side="left")
    d_right = np.where(
        r < label_times.size,
        label_times[np.minimum(r, label_times.size - 1)] - csi_times,
        big,
    )
    d_left = np.where(r > 0, csi_times - label_times[np.maximum(r - 1, 0)], big)
    best_d = np.minimum(d_left, d_right)
    # the earliest label attaining the minimum distance: no label can lie
    # strictly inside (t - best_d, t + best_d), so the first label at or
    # after t - best_d is the earliest argmin
    best_idx = np.searchsorted(label_times, csi_times - best_d, side="left")
    matched = best_d <= config.epsilon_ns
    pairs = [
        SyncedPair(
            csi_events[i][1],
            int(csi_times[i]),
            label_events[best_idx[i]][1],
            int(label_times[best_idx[i]]),
        )
        for i in np.flatnonzero(matched)
    ]
    return pairs, int(np.count_nonzero(~matched))


def _label_value(label) -> int:
    return int(getattr(label, "label", label))


def build_labeled_dataset(pairs, window: int, stride: int | None = None):
    """Aggregate frame-level pairs into fixed-length LabeledSamples.

    Each window takes the label of its final frame's pair; windows whose
    pairs disagree on the label are dropped and counted. The CSI payload of
    each pair must be that frame's feature vector.

    Returns (samples, dropped_count).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    samples = []
    dropped = 0
    labels = np.array([_label_value(p.label) for p in pairs], dtype=np.int64)
    for start in range(0, len(pairs) - window + 1, stride):
        chunk = labels[start : start + window]
        if np.all(chunk == chunk[-1]):
            feats = np.stack([np.asarray(pairs[i].csi) for i in range(start, start + window)])
            final = pairs[start + window - 1]
            samples.append(LabeledSample(feats, int(chunk[-1]), final.delta_ns))
        else:
            dropped += 1
    return samples, dropped
