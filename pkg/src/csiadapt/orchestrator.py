"""Closed-loop adaptation: trigger, collect, fine-tune, redistribute.

A single logical state machine drives the cycle
MONITORING -> COLLECTING -> TRAINING -> DISTRIBUTING -> MONITORING.
The teacher label source is active only while COLLECTING (instrumented so
tests can prove it), any aborted cycle leaves every node's weights
bit-identical, and weight distribution is two-phase (stage, then commit)
so a mid-cycle failure never leaves a node half-upgraded.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import simulator
from .gru import (
    GruParameters,
    TrainConfig,
    fine_tune,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)
from .protocol import (
    ACK_OK,
    ACK_REJECT,
    Ack,
    LabeledBatch,
    Session,
    UpdateRequest,
    WeightPackage,
    in_proc_pair,
)
from .simulator import ActivityClass, ChannelProfile, DomainShiftSpec
from .sync import ClockModel, RingBuffer, SyncConfig, build_labeled_dataset, pair_streams

__all__ = [
    "AdaptationEvent",
    "AdaptationPolicy",
    "ClosedLoopOrchestrator",
    "ConfidenceMonitor",
    "CycleAborted",
    "DetectionNode",
    "EvalResult",
    "InstrumentedTeacher",
    "LatencyMeter",
    "LoopState",
    "SimEnvironment",
    "TrainingNode",
    "build_loop",
    "evaluate",
    "monitor",
]


class LoopState(Enum):
    MONITORING = "monitoring"
    COLLECTING = "collecting"
    TRAINING = "training"
    DISTRIBUTING = "distributing"


class CycleAborted(RuntimeError):
    """An adaptation cycle could not complete; weights are unchanged."""


@dataclass(frozen=True)
class AdaptationPolicy:
    """Trigger and collection parameters of the closed loop."""

    confidence_threshold: float = 0.80
    window: int = 50  # prediction windows averaged by the trigger
    cooldown_s: float = 120.0
    min_labeled_samples: int = 12
    collection_s: float = 60.0
    collection_stride: int | None = 32  # frames between collected windows

    def __post_init__(self):
        if not (0.0 < self.confidence_threshold < 1.0):
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if self.window < 1 or self.min_labeled_samples < 1:
            raise ValueError("window and min_labeled_samples must be >= 1")
        if self.cooldown_s <= 0 or self.collection_s <= 0:
            raise ValueError("cooldown_s and collection_s must be > 0")
        if self.cooldown_s < self.collection_s:
            raise ValueError("cooldown_s must be >= collection_s")


@dataclass(frozen=True)
class AdaptationEvent:
    kind: str  # trigger | collect-done | train-done | distribute-done
    timestamp_ns: int
    metrics: dict


def monitor(confidences, policy: AdaptationPolicy, elapsed_since_cycle_s: float = float("inf")) -> bool:
    """Trigger decision: windowed mean below threshold and cooldown elapsed."""
    if elapsed_since_cycle_s < policy.cooldown_s:
        return False
    if len(confidences) < policy.window:
        return False
    recent = np.asarray(confidences[-policy.window :], dtype=np.float64)
    return bool(recent.mean() < policy.confidence_threshold)


class ConfidenceMonitor:
    """Streaming wrapper around monitor() holding the sliding window."""

    def __init__(self, policy: AdaptationPolicy):
        self.policy = policy
        self.values: list[float] = []

    def update(self, confidence: float, elapsed_since_cycle_s: float = float("inf")) -> bool:
        self.values.append(float(confidence))
        if len(self.values) > self.policy.window:
            self.values = self.values[-self.policy.window :]
        return monitor(self.values, self.policy, elapsed_since_cycle_s)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else 1.0


@dataclass(frozen=True)
class EvalResult:
    """Per-class accuracies plus their unweighted mean."""

    per_class: np.ndarray
    counts: np.ndarray
    overall: float


def evaluate(params: GruParameters, windows: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Per-class and class-averaged accuracy on a labeled window set.

    Requires every class 0..C-1 to appear in the labels.
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("test set must be non-empty")
    n_classes = params.n_classes
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ValueError(f"test set is missing classes {missing}")
    pred, _conf, _probs = predict_batch(windows, params)
    per_class = np.array(
        [float(np.mean(pred[y == c] == c)) for c in range(n_classes)]
    )
    return EvalResult(per_class=per_class, counts=counts, overall=float(per_class.mean()))


class LatencyMeter:
    """Accumulated wall time per pipeline stage."""

    STAGES = ("csi_preprocessing", "teacher_inference", "pairing", "student_inference")

    def __init__(self):
        self.seconds = {s: 0.0 for s in self.STAGES}

    @contextmanager
    def timer(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[stage] += time.perf_counter() - t0

    @property
    def total(self) -> float:
        return sum(self.seconds.values())


class InstrumentedTeacher:
    """Counts label requests and flags any made outside COLLECTING."""

    def __init__(self, source):
        self.source = source
        self.active = False
        self.total_calls = 0
        self.calls_while_inactive = 0

    @property
    def label_rate_hz(self) -> float:
        return self.source.label_rate_hz

    def label_for(self, true_class, timestamp_ns):
        self.total_calls += 1
        if not self.active:
            self.calls_while_inactive += 1
        return self.source.label_for(true_class, timestamp_ns)


class SimEnvironment:
    """Live world for the loop: current channel, sim clock, stream factory.

    Generated streams advance the simulated clock; evaluation sets do not.
    All randomness derives from (seed, internal draw counter) so identical
    call sequences reproduce identical data.
    """

    def __init__(
        self,
        profile: ChannelProfile,
        rate_hz: float = 100.0,
        window: int = 128,
        segment_s: float = 2.56,
        seed: int = 0,
        csi_jitter_ns: float = 20_000.0,
        label_jitter_ns: float = 100_000.0,
    ):
        self.profile = profile
        self.rate_hz = float(rate_hz)
        self.window = int(window)
        self.segment_s = float(segment_s)
        self.seed = int(seed)
        self.csi_jitter_ns = float(csi_jitter_ns)
        self.label_jitter_ns = float(label_jitter_ns)
        self.now_ns = simulator.EPOCH_NS
        self._counter = 0

    def _child_seed(self) -> int:
        self._counter += 1
        return (self.seed * 1_000_003 + self._counter) % (1 << 63)

    def inject_shift(self, spec: DomainShiftSpec) -> None:
        self.profile = simulator.apply_domain_shift(self.profile, spec)

    def _schedule(self, duration_s: float, seed: int):
        per_class = max(1, round(duration_s / (self.segment_s * len(ActivityClass))))
        return simulator.balanced_schedule(self.segment_s, per_class, seed=seed)

    def stream_windows(self, duration_s: float, latency: LatencyMeter | None = None):
        """Ground-truth labeled windows from a live stream; advances time."""
        seed = self._child_seed()
        schedule = self._schedule(duration_s, seed)
        _ts, mats, labels = simulator.generate_arrays(schedule, self.profile, self.rate_hz, seed)
        if latency is not None:
            with latency.timer("csi_preprocessing"):
                feats = simulator.features_for_frames(mats)
        else:
            feats = simulator.features_for_frames(mats)
        x, y, _dropped = simulator.make_windows(feats, labels, self.window)
        self.now_ns += int(sum(d for _, d in schedule) * 1e9)
        return x, y

    def eval_dataset(self, windows_per_class: int = 50, salt: int = 0):
        """Held-out ground-truth window set under the current profile.

        Does not advance the simulated clock (offline evaluation data).
        """
        seed = (self.seed * 2_000_003 + 700_001 + salt) % (1 << 63)
        windows_per_segment = max(1, int(self.segment_s * self.rate_hz) // self.window)
        segs_per_class = max(1, windows_per_class // windows_per_segment)
        schedule = simulator.balanced_schedule(self.segment_s, segs_per_class, seed=seed)
        _ts, mats, labels = simulator.generate_arrays(schedule, self.profile, self.rate_hz, seed)
        feats = simulator.features_for_frames(mats)
        x, y, _ = simulator.make_windows(feats, labels, self.window)
        return x, y

    def collect(self, duration_s: float, teacher, latency: LatencyMeter | None = None,
                sync_config: SyncConfig | None = None):
        """Simultaneous CSI + teacher label acquisition; advances time.

        Returns (csi_events, label_events) as (timestamp, payload) lists,
        already passed through the stream ring buffers. CSI payloads are
        per-frame feature vectors, label payloads TeacherLabel objects.
        """
        cfg = sync_config or SyncConfig()
        seed = self._child_seed()
        schedule = self._schedule(duration_s, seed)
        total_s = sum(d for _, d in schedule)
        nominal0 = self.now_ns
        _ts, mats, labels = simulator.generate_arrays(schedule, self.profile, self.rate_hz, seed)
        if latency is not None:
            with latency.timer("csi_preprocessing"):
                feats = simulator.features_for_frames(mats)
        else:
            feats = simulator.features_for_frames(mats)

        csi_clock = ClockModel(
            pps_epoch_ns=nominal0, jitter_std_ns=self.csi_jitter_ns, seed=seed % (1 << 32)
        )
        label_clock = ClockModel(
            pps_epoch_ns=nominal0, jitter_std_ns=self.label_jitter_ns, seed=(seed + 1) % (1 << 32)
        )

        csi_buf = RingBuffer(cfg.csi_buffer_capacity)
        for i in range(feats.shape[0]):
            nominal = nominal0 + int(round(i * 1e9 / self.rate_hz))
            csi_buf.push((csi_clock.stamp(nominal), feats[i]))

        bounds = np.cumsum([d for _, d in schedule])
        label_buf = RingBuffer(cfg.label_buffer_capacity)
        n_ticks = int(np.floor(total_s * teacher.label_rate_hz))
        t0 = time.perf_counter()
        for j in range(n_ticks):
            rel_s = j / teacher.label_rate_hz
            seg = min(int(np.searchsorted(bounds, rel_s, side="right")), len(schedule) - 1)
            true_class = schedule[seg][0]
            stamped = label_clock.stamp(nominal0 + int(round(rel_s * 1e9)))
            label_buf.push((stamped, teacher.label_for(true_class, stamped)))
        if latency is not None:
            latency.seconds["teacher_inference"] += time.perf_counter() - t0

        self.now_ns += int(total_s * 1e9)
        return csi_buf.drain(), label_buf.drain()

    @property
    def now_s(self) -> float:
        return (self.now_ns - simulator.EPOCH_NS) / 1e9


class DetectionNode:
    """Inference unit holding the currently served weight snapshot."""

    def __init__(self, node_id: int, params: GruParameters, session: Session):
        self.node_id = node_id
        self.params = params
        self.version = 0
        self.session = session
        self._staged: tuple[int, GruParameters] | None = None

    def predict_windows(self, windows: np.ndarray, latency: LatencyMeter | None = None):
        if latency is not None:
            with latency.timer("student_inference"):
                return predict_batch(windows, self.params)
        return predict_batch(windows, self.params)

    def stage_package(self, pkg: WeightPackage) -> Ack:
        """Verify and stage a weight package; old weights keep serving."""
        try:
            new_params = load_checkpoint(pkg.checkpoint)
        except ValueError:
            self._staged = None
            return Ack(pkg.version, ACK_REJECT)
        if pkg.version <= self.version:
            self._staged = None
            return Ack(pkg.version, ACK_REJECT)
        self._staged = (pkg.version, new_params)
        return Ack(pkg.version, ACK_OK)

    def commit_staged(self) -> None:
        if self._staged is None:
            raise CycleAborted(f"node {self.node_id} has nothing staged")
        self.version, self.params = self._staged
        self._staged = None

    def rollback_staged(self) -> None:
        self._staged = None


class TrainingNode:
    """Edge server: fine-tunes on uploaded batches and packages weights."""

    def __init__(self, params: GruParameters, train_config: TrainConfig):
        self.params = params
        self.version = 0
        self.train_config = train_config
        self.sessions: dict[int, Session] = {}
        self._staged: GruParameters | None = None

    def session_for(self, node_id: int) -> Session:
        return self.sessions[node_id]

    def fine_tune_on(self, batch: LabeledBatch):
        samples = [(batch.features[i], batch.labels[i]) for i in range(batch.count)]
        new_params, history = fine_tune(self.params, samples, self.train_config)
        self._staged = new_params
        return history

    def staged_package(self) -> WeightPackage:
        if self._staged is None:
            raise CycleAborted("no staged parameters to package")
        return WeightPackage(self.version + 1, save_checkpoint(self._staged))

    def commit(self) -> None:
        if self._staged is None:
            raise CycleAborted("no staged parameters to commit")
        self.version += 1
        self.params = self._staged
        self._staged = None

    def rollback(self) -> None:
        self._staged = None


def build_loop(
    params: GruParameters,
    n_nodes: int = 1,
    train_config: TrainConfig | None = None,
):
    """Wire detection nodes to a training node over in-process sessions."""
    trainer = TrainingNode(params, train_config or TrainConfig())
    nodes = []
    for node_id in range(n_nodes):
        a, b = in_proc_pair()
        node = DetectionNode(node_id, params, Session(a))
        trainer.sessions[node_id] = Session(b)
        nodes.append(node)
    return nodes, trainer


class ClosedLoopOrchestrator:
    """Serializes all state transitions of the adaptation loop."""

    def __init__(
        self,
        env: SimEnvironment,
        nodes: list[DetectionNode],
        trainer: TrainingNode,
        teacher,
        policy: AdaptationPolicy,
        sync_config: SyncConfig | None = None,
        distribution_timeout_s: float = 2.0,
        distribution_retries: int = 1,
    ):
        self.env = env
        self.nodes = nodes
        self.trainer = trainer
        self.teacher = teacher if isinstance(teacher, InstrumentedTeacher) else InstrumentedTeacher(teacher)
        self.policy = policy
        self.sync_config = sync_config or SyncConfig()
        self.distribution_timeout_s = distribution_timeout_s
        self.distribution_retries = distribution_retries
        self.state = LoopState.MONITORING
        self.events: list[AdaptationEvent] = []
        self.latency = LatencyMeter()
        self.monitor = ConfidenceMonitor(policy)
        self.last_cycle_end_ns: int | None = None

    @property
    def weight_version(self) -> int:
        return self.trainer.version

    def _log(self, kind: str, **metrics) -> None:
        self.events.append(AdaptationEvent(kind, self.env.now_ns, dict(metrics)))

    def elapsed_since_cycle_s(self) -> float:
        if self.last_cycle_end_ns is None:
            return float("inf")
        return (self.env.now_ns - self.last_cycle_end_ns) / 1e9

    def observe_stream(self, duration_s: float) -> bool:
        """Run monitoring over a live stream; returns True when triggered."""
        if self.state is not LoopState.MONITORING:
            raise CycleAborted(f"cannot monitor while {self.state}")
        x, _y = self.env.stream_windows(duration_s, self.latency)
        node = self.nodes[0]
        _labels, confs, _probs = node.predict_windows(x, self.latency)
        for c in confs:
            if self.monitor.update(float(c), self.elapsed_since_cycle_s()):
                return True
        return False

    def run_cycle(self) -> int:
        """Execute one full adaptation cycle; returns the new weight version.

        Raises CycleAborted (with all weights bit-identical to the pre-cycle
        checkpoint) when too few labeled samples were produced or when
        distribution fails after the configured retries.
        """
        if self.state is not LoopState.MONITORING:
            raise CycleAborted(f"cycle requested while {self.state}")
        node = self.nodes[0]
        mean_conf = self.monitor.mean
        self._log("trigger", mean_confidence=mean_conf, weight_version=self.weight_version)

        # step 1: update request from the detection node to the trainer
        node.session.send(UpdateRequest(node.node_id, mean_conf))
        request = self.trainer.session_for(node.node_id).recv()
        assert isinstance(request, UpdateRequest)

        # step 2+3: teacher on, synchronized collection, labels assigned
        self.state = LoopState.COLLECTING
        self.teacher.active = True
        try:
            csi_events, label_events = self.env.collect(
                self.policy.collection_s, self.teacher, self.latency, self.sync_config
            )
        finally:
            self.teacher.active = False
        with self.latency.timer("pairing"):
            pairs, unmatched = pair_streams(csi_events, label_events, self.sync_config)
            samples, dropped = build_labeled_dataset(
                pairs, self.env.window, self.policy.collection_stride
            )
        self._log(
            "collect-done",
            pairs=len(pairs),
            unmatched=unmatched,
            samples=len(samples),
            dropped=dropped,
        )
        if len(samples) < self.policy.min_labeled_samples:
            self.state = LoopState.MONITORING
            self.last_cycle_end_ns = self.env.now_ns
            raise CycleAborted(
                f"only {len(samples)} labeled samples, need {self.policy.min_labeled_samples}"
            )

        # step 4: upload and fine-tune on the training node
        self.state = LoopState.TRAINING
        batch = LabeledBatch(
            tuple(s.label for s in samples), np.stack([s.features for s in samples])
        )
        node.session.send(batch)
        received = self.trainer.session_for(node.node_id).recv()
        history = self.trainer.fine_tune_on(received)
        self._log("train-done", samples=received.count, final_loss=history[-1])

        # step 5: two-phase weight distribution to every online node
        self.state = LoopState.DISTRIBUTING
        try:
            new_version = self._distribute()
        except CycleAborted:
            self.trainer.rollback()
            for n in self.nodes:
                n.rollback_staged()
            self.state = LoopState.MONITORING
            self.last_cycle_end_ns = self.env.now_ns
            raise
        self._log("distribute-done", weight_version=new_version, nodes=len(self.nodes))
        self.state = LoopState.MONITORING
        self.monitor.values.clear()
        self.last_cycle_end_ns = self.env.now_ns
        return new_version

    def _distribute(self) -> int:
        pkg = self.trainer.staged_package()
        for n in self.nodes:
            staged = False
            for _attempt in range(1 + self.distribution_retries):
                self.trainer.session_for(n.node_id).send(pkg)
                try:
                    received = n.session.recv(timeout=self.distribution_timeout_s)
                    n.session.send(n.stage_package(received))
                    ack = self.trainer.session_for(n.node_id).recv(
                        timeout=self.distribution_timeout_s
                    )
                except TimeoutError:
                    continue  # retry the send, then give up
                except Exception as exc:
                    raise CycleAborted(f"distribution to node {n.node_id} failed: {exc}")
                if isinstance(ack, Ack) and ack.ok:
                    staged = True
                    break
            if not staged:
                raise CycleAborted(f"node {n.node_id} never staged version {pkg.version}")
        # commit phase
        for n in self.nodes:
            self.trainer.session_for(n.node_id).send(Ack(pkg.version, ACK_OK))
            commit_msg = n.session.recv(timeout=self.distribution_timeout_s)
            assert isinstance(commit_msg, Ack) and commit_msg.ok
            n.commit_staged()
            n.session.send(Ack(pkg.version, ACK_OK))
            final = self.trainer.session_for(n.node_id).recv(
                timeout=self.distribution_timeout_s
            )
            assert isinstance(final, Ack) and final.ok
        self.trainer.commit()
        return self.trainer.version
