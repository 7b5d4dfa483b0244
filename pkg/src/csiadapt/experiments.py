"""End-to-end experiment pipelines shared by the CLI and the test suite.

train_baseline fits the student on in-domain synthetic data; run_closed_loop
injects the configured shift, measures degradation, runs one adaptation
cycle and measures recovery. Everything derives its randomness from the
experiment seed, so identical configs reproduce identical artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .config import ExperimentConfig
from .gru import GruParameters, TrainConfig, fine_tune, init_parameters, save_checkpoint
from .orchestrator import (
    AdaptationPolicy,
    ClosedLoopOrchestrator,
    CycleAborted,
    LatencyMeter,
    SimEnvironment,
    build_loop,
    evaluate,
)
from .reports import LatencyReport, MetricsTable
from .simulator import (
    SEVERE_SHIFT,
    ActivityClass,
    ChannelProfile,
    DomainShiftSpec,
    balanced_schedule,
    default_profile,
    features_for_frames,
    generate_arrays,
    make_windows,
    split_dataset,
)
from .teacher import (
    AttentionTeacher,
    OracleTeacher,
    OracleTeacherConfig,
    init_attention_params,
    scene_descriptor,
    train_attention_teacher,
)

__all__ = [
    "BaselineResult",
    "LoopResult",
    "derive_seed",
    "make_profile",
    "make_teacher",
    "run_closed_loop",
    "shift_spec_from",
    "train_baseline",
]


def derive_seed(seed: int, salt: int) -> int:
    return (seed * 1_000_003 + salt) % (1 << 63)


def make_profile(cfg: ExperimentConfig) -> ChannelProfile:
    prof = default_profile(cfg.sim.subcarriers, seed=cfg.sim.profile_seed)
    if cfg.sim.snr_db != prof.snr_db:
        prof = ChannelProfile(
            attenuation_db=prof.attenuation_db,
            taps=prof.taps,
            phase_offset=prof.phase_offset,
            snr_db=cfg.sim.snr_db,
            subcarrier_gains=prof.subcarrier_gains,
        )
    return prof


def shift_spec_from(cfg: ExperimentConfig) -> DomainShiftSpec | None:
    if cfg.shift.preset == "none":
        return None
    if cfg.shift.preset == "severe":
        return SEVERE_SHIFT
    return DomainShiftSpec(
        attenuation_delta_db=cfg.shift.attenuation_delta_db,
        reseed=None if cfg.shift.reseed < 0 else cfg.shift.reseed,
        phase_delta=cfg.shift.phase_delta,
        snr_delta_db=cfg.shift.snr_delta_db,
        gain_perturb_scale=cfg.shift.gain_perturb_scale,
    )


@lru_cache(maxsize=4)
def _trained_attention(seed: int):
    """Deterministically trained attention-teacher parameters."""
    rng = np.random.default_rng(derive_seed(seed, 101))
    n = 960
    labels = np.array([i % len(ActivityClass) for i in range(n)])
    maps = np.stack([scene_descriptor(ActivityClass(int(c)), rng) for c in labels])
    params = init_attention_params(seed=derive_seed(seed, 102) % (1 << 32))
    trained, _hist = train_attention_teacher(
        params, maps, labels, epochs=40, seed=derive_seed(seed, 103) % (1 << 32)
    )
    return trained


def make_teacher(cfg: ExperimentConfig, seed: int):
    if cfg.teacher.kind == "attention":
        return AttentionTeacher(
            _trained_attention(0),
            label_rate_hz=cfg.teacher.label_rate_hz,
            seed=seed % (1 << 32),
            hold_ms=cfg.teacher.error_hold_ms,
        )
    return OracleTeacher(
        OracleTeacherConfig(
            precision=cfg.teacher.precision,
            label_rate_hz=cfg.teacher.label_rate_hz,
            seed=seed % (1 << 32),
            error_hold_ms=cfg.teacher.error_hold_ms,
        )
    )


@dataclass(frozen=True)
class BaselineResult:
    params: GruParameters
    table: MetricsTable
    loss_history: tuple
    checkpoint: bytes


def build_baseline_dataset(cfg: ExperimentConfig, seed: int):
    """In-domain windows plus stratified split indices."""
    prof = make_profile(cfg)
    schedule = balanced_schedule(
        cfg.sim.segment_s, cfg.sim.segments_per_class, seed=derive_seed(seed, 1)
    )
    _ts, mats, labels = generate_arrays(schedule, prof, cfg.sim.rate_hz, derive_seed(seed, 2))
    feats = features_for_frames(mats)
    x, y, _ = make_windows(feats, labels, cfg.sim.window)
    train_idx, val_idx, test_idx = split_dataset(y, (0.8, 0.1, 0.1), seed=derive_seed(seed, 3))
    return x, y, train_idx, val_idx, test_idx


def train_baseline(cfg: ExperimentConfig, seed: int) -> BaselineResult:
    x, y, train_idx, _val_idx, test_idx = build_baseline_dataset(cfg, seed)
    params0 = init_parameters(
        input_dim=x.shape[2],
        hidden_dims=cfg.model.hidden,
        n_classes=len(ActivityClass),
        seed=derive_seed(seed, 4),
    )
    train_cfg = TrainConfig(
        learning_rate=cfg.model.baseline_learning_rate,
        epochs=cfg.model.baseline_epochs,
        batch_size=cfg.model.baseline_batch_size,
        seed=derive_seed(seed, 5),
    )
    params, history = fine_tune(params0, list(zip(x[train_idx], y[train_idx])), train_cfg)
    result = evaluate(params, x[test_idx], y[test_idx])
    table = MetricsTable("baseline", seed, tuple(result.per_class), result.overall)
    return BaselineResult(params, table, tuple(history), save_checkpoint(params))


@dataclass(frozen=True)
class LoopResult:
    """Outcome of one closed-loop run for one seed."""

    tables: dict  # phase -> MetricsTable
    events: tuple
    latency: LatencyReport
    status: str  # completed | no-trigger | aborted: <reason>
    weight_version: int
    trigger_mean_confidence: float | None


def _policy_from(cfg: ExperimentConfig) -> AdaptationPolicy:
    return AdaptationPolicy(
        confidence_threshold=cfg.policy.confidence_threshold,
        window=cfg.policy.window,
        cooldown_s=cfg.policy.cooldown_s,
        min_labeled_samples=cfg.policy.min_labeled_samples,
        collection_s=cfg.policy.collection_s,
        collection_stride=cfg.policy.collection_stride,
    )


def run_closed_loop(cfg: ExperimentConfig, seed: int, baseline_params: GruParameters) -> LoopResult:
    """Shift injection, degradation measurement, one cycle, recovery measurement."""
    env = SimEnvironment(
        make_profile(cfg),
        rate_hz=cfg.sim.rate_hz,
        window=cfg.sim.window,
        segment_s=cfg.sim.segment_s,
        seed=derive_seed(seed, 11),
    )
    adapt_cfg = TrainConfig(
        learning_rate=cfg.adapt.learning_rate,
        epochs=cfg.adapt.epochs,
        batch_size=cfg.adapt.batch_size,
        seed=derive_seed(seed, 13),
    )
    nodes, trainer = build_loop(baseline_params, cfg.run.n_nodes, adapt_cfg)
    teacher = make_teacher(cfg, derive_seed(seed, 17))
    orch = ClosedLoopOrchestrator(env, nodes, trainer, teacher, _policy_from(cfg))

    spec = shift_spec_from(cfg)
    if spec is not None:
        env.inject_shift(spec)

    eval_x, eval_y = env.eval_dataset(cfg.run.eval_windows_per_class, salt=1)
    with orch.latency.timer("student_inference"):
        pre = evaluate(nodes[0].params, eval_x, eval_y)
    tables = {"shifted": MetricsTable("shifted", seed, tuple(pre.per_class), pre.overall)}

    windows_seen = eval_x.shape[0]
    status = "completed"
    trigger_mean = None
    triggered = orch.observe_stream(cfg.run.monitor_s)
    windows_seen += len(orch.monitor.values)
    if not triggered:
        status = "no-trigger"
    else:
        trigger_mean = orch.monitor.mean
        try:
            orch.run_cycle()
        except CycleAborted as exc:
            status = f"aborted: {exc}"
        else:
            with orch.latency.timer("student_inference"):
                post = evaluate(nodes[0].params, eval_x, eval_y)
            tables["recovered"] = MetricsTable(
                "recovered", seed, tuple(post.per_class), post.overall
            )
            windows_seen += eval_x.shape[0]

    latency = LatencyReport(dict(orch.latency.seconds), windows_seen)
    return LoopResult(
        tables=tables,
        events=tuple(orch.events),
        latency=latency,
        status=status,
        weight_version=orch.weight_version,
        trigger_mean_confidence=trigger_mean,
    )
