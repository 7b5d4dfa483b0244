"""Closed-loop teacher-student adaptation for WiFi-CSI activity recognition.

A desk-scale framework: a synthetic CSI stream generator with controllable
domain shift, a three-layer GRU classifier trained by exact-gradient BPTT,
pluggable supervisory label sources, PPS-anchored timestamp pairing, a
confidence-triggered adaptation loop, and a versioned node/server weight
distribution protocol.
"""

from .config import ExperimentConfig, load_config
from .gru import (
    GruParameters,
    Prediction,
    TrainConfig,
    fine_tune,
    init_parameters,
    load_checkpoint,
    predict_with_confidence,
    save_checkpoint,
)
from .numerics import AdamHyper, AdamState, adam_step, magnitude_spectrum, minmax_normalize, sigmoid, softmax
from .orchestrator import (
    AdaptationPolicy,
    ClosedLoopOrchestrator,
    CycleAborted,
    SimEnvironment,
    build_loop,
    evaluate,
)
from .simulator import (
    SEVERE_SHIFT,
    ActivityClass,
    ChannelProfile,
    CsiFrame,
    DomainShiftSpec,
    apply_domain_shift,
    default_profile,
    frame_to_features,
    generate_stream,
    split_dataset,
)
from .teacher import AttentionTeacher, OracleTeacher, OracleTeacherConfig, TeacherLabel

__version__ = "0.1.0"
