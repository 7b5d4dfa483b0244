"""Pluggable supervisory label sources.

Two implementations of the same interface: a configurable-precision oracle
(the default, so adaptation behavior can be isolated from teacher quality)
and a small trainable classifier over synthetic scene descriptors that
exercises channel/spatial attention:

    s_c = sigmoid(FC2(relu(FC1(GAP(F)))))           channel attention
    s_s = sigmoid(conv7x7(concat(avgpool, maxpool)))  spatial attention
    F_att = s_c * F                                   channel-scaled map

A label source exposes label_for(true_class, timestamp_ns) -> TeacherLabel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .numerics import AdamHyper, AdamState, adam_step, sigmoid, softmax
from .simulator import ActivityClass

__all__ = [
    "AttentionBlockParams",
    "AttentionTeacher",
    "OracleTeacher",
    "OracleTeacherConfig",
    "TeacherLabel",
    "apply_attention",
    "attention_teacher_classify",
    "channel_attention",
    "init_attention_params",
    "scene_descriptor",
    "spatial_attention",
    "train_attention_teacher",
    "uniform_confusion",
]

N_CLASSES = len(ActivityClass)

# synthetic scene descriptor geometry: 4 channels over an 8x8 grid
SCENE_CHANNELS = 4
SCENE_SIZE = 8
_SCENE_SEED = 77_177


@dataclass(frozen=True)
class TeacherLabel:
    """Activity label produced by a teacher, with confidence and timestamp."""

    label: ActivityClass
    confidence: float
    timestamp_ns: int

    def __post_init__(self):
        if not (0.0 < self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")


def uniform_confusion(precision: float, n_classes: int = N_CLASSES) -> np.ndarray:
    """Confusion matrix with diagonal p and uniform off-diagonal errors."""
    off = (1.0 - precision) / (n_classes - 1)
    mat = np.full((n_classes, n_classes), off)
    np.fill_diagonal(mat, precision)
    return mat


@dataclass(frozen=True)
class OracleTeacherConfig:
    """Precision, error confusion, label rate and seed of the oracle.

    error_hold_ms models scene-coherent misclassification: the oracle keeps
    one decision while the observed activity is unchanged and the hold has
    not expired, instead of re-rolling at every label tick. Set to 0 for a
    fresh draw on every call.
    """

    precision: float = 0.703
    confusion: np.ndarray | None = None
    label_rate_hz: float = 30.0
    seed: int = 0
    error_hold_ms: float = 2000.0

    def __post_init__(self):
        if not (0.0 <= self.precision <= 1.0):
            raise ValueError("precision must lie in [0, 1]")
        if self.label_rate_hz <= 0:
            raise ValueError("label_rate_hz must be > 0")
        if self.error_hold_ms < 0:
            raise ValueError("error_hold_ms must be >= 0")
        conf = self.confusion
        if conf is None:
            conf = uniform_confusion(self.precision)
        conf = np.asarray(conf, dtype=np.float64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError("confusion must be square")
        if np.any(np.abs(conf.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must sum to 1")
        if np.any(np.abs(np.diag(conf) - self.precision) > 1e-9):
            raise ValueError("confusion diagonal must equal the configured precision")
        object.__setattr__(self, "confusion", conf)


class OracleTeacher:
    """Label source that is correct with the configured probability.

    Wrong labels are drawn from the true class's confusion row; a decision
    is held while the true class is unchanged and the hold time has not
    expired (see OracleTeacherConfig.error_hold_ms). The emitted confidence
    is the row probability of the emitted label.
    """

    def __init__(self, config: OracleTeacherConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._held_class: int | None = None
        self._held_label: int | None = None
        self._hold_until_ns = -(1 << 62)

    @property
    def label_rate_hz(self) -> float:
        return self.config.label_rate_hz

    def label_for(self, true_class: ActivityClass, timestamp_ns: int) -> TeacherLabel:
        true = int(ActivityClass(true_class))
        ts = int(timestamp_ns)
        row = self.config.confusion[true]
        if self._held_class != true or ts >= self._hold_until_ns:
            self._held_class = true
            self._held_label = int(self._rng.choice(row.size, p=row))
            self._hold_until_ns = ts + int(self.config.error_hold_ms * 1e6)
        emitted = self._held_label
        conf = float(max(row[emitted], 1e-6))
        return TeacherLabel(ActivityClass(emitted), conf, ts)


@dataclass(frozen=True)
class AttentionBlockParams:
    """Channel/spatial attention block plus a linear classifier head.

    fc1 (C_mid x C_ch) and fc2 (C_ch x C_mid) form the squeeze bottleneck
    (C_mid < C_ch); conv_kernel (2, 7, 7) acts on the pooled pair for the
    spatial branch. `trained` gates classification.
    """

    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    conv_kernel: np.ndarray
    conv_b: float
    head_w: np.ndarray
    head_b: np.ndarray
    use_spatial: bool = False
    trained: bool = False

    def __post_init__(self):
        c_mid, c_ch = self.fc1_w.shape
        if c_mid >= c_ch:
            raise ValueError(f"bottleneck requires C_mid < C_ch, got {c_mid} >= {c_ch}")
        if self.fc2_w.shape != (c_ch, c_mid):
            raise ValueError("fc2_w must be (C_ch, C_mid)")
        if self.fc1_b.shape != (c_mid,) or self.fc2_b.shape != (c_ch,):
            raise ValueError("fc bias shapes inconsistent")
        if self.conv_kernel.shape != (2, 7, 7):
            raise ValueError("conv_kernel must have shape (2, 7, 7)")
        if self.head_w.shape[1] != c_ch or self.head_b.shape != (self.head_w.shape[0],):
            raise ValueError("head shapes inconsistent with channel count")

    @property
    def n_channels(self) -> int:
        return self.fc1_w.shape[1]


def init_attention_params(
    n_channels: int = SCENE_CHANNELS,
    c_mid: int = 2,
    n_classes: int = N_CLASSES,
    seed: int = 0,
    use_spatial: bool = False,
) -> AttentionBlockParams:
    rng = np.random.default_rng(seed)
    k1 = 1.0 / np.sqrt(n_channels)
    k2 = 1.0 / np.sqrt(c_mid)
    return AttentionBlockParams(
        fc1_w=rng.uniform(-k1, k1, (c_mid, n_channels)),
        fc1_b=np.zeros(c_mid),
        fc2_w=rng.uniform(-k2, k2, (n_channels, c_mid)),
        fc2_b=np.zeros(n_channels),
        conv_kernel=rng.uniform(-0.2, 0.2, (2, 7, 7)),
        conv_b=0.0,
        head_w=rng.uniform(-k1, k1, (n_classes, n_channels)),
        head_b=np.zeros(n_classes),
        use_spatial=use_spatial,
    )


def _check_map(fmap: np.ndarray, n_channels: int) -> np.ndarray:
    f = np.asarray(fmap, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got shape {f.shape}")
    if f.shape[0] != n_channels:
        raise ValueError(f"feature map has {f.shape[0]} channels, expected {n_channels}")
    return f


def channel_attention(fmap: np.ndarray, params: AttentionBlockParams) -> np.ndarray:
    """Per-channel gate in (0,1): sigmoid(FC2(relu(FC1(GAP(F)))))."""
    f = _check_map(fmap, params.n_channels)
    g = f.mean(axis=(1, 2))
    a = np.maximum(params.fc1_w @ g + params.fc1_b, 0.0)
    v = params.fc2_w @ a + params.fc2_b
    return sigmoid(v)


def spatial_attention(fmap: np.ndarray, params: AttentionBlockParams) -> np.ndarray:
    """Spatial gate map in (0,1) from pooled channels through a 7x7 conv.

    Channel-wise average and max pooling give a 2-channel map; the kernel
    is correlated with zero padding 3 so the output keeps (H, W).
    """
    f = np.asarray(fmap, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] < 1 or f.shape[2] < 1:
        raise ValueError(f"feature map must be (C, H, W), got shape {f.shape}")
    pooled = np.stack([f.mean(axis=0), f.max(axis=0)])
    q = np.zeros(f.shape[1:])
    for c in range(2):
        q += correlate2d(pooled[c], params.conv_kernel[c], mode="same", boundary="fill")
    q += params.conv_b
    return sigmoid(q)


def apply_attention(fmap: np.ndarray, s_c: np.ndarray) -> np.ndarray:
    """Scale channel c of the map by s_c[c], broadcast over positions."""
    f = np.asarray(fmap, dtype=np.float64)
    s = np.asarray(s_c, dtype=np.float64)
    if f.ndim != 3 or s.shape != (f.shape[0],):
        raise ValueError(f"channel mismatch: map {f.shape} vs gate {s.shape}")
    return s[:, None, None] * f


def _classify_forward(fmap: np.ndarray, params: AttentionBlockParams, bypass_channel: bool):
    s_c = np.ones(params.n_channels) if bypass_channel else channel_attention(fmap, params)
    f_att = apply_attention(fmap, s_c)
    if params.use_spatial:
        f_att = spatial_attention(f_att, params)[None, :, :] * f_att
    pooled = f_att.mean(axis=(1, 2))
    logits = params.head_w @ pooled + params.head_b
    return logits


def attention_teacher_classify(
    fmap: np.ndarray,
    params: AttentionBlockParams,
    timestamp_ns: int = 0,
    bypass_channel: bool = False,
) -> TeacherLabel:
    """Classify a scene descriptor map through the attention block.

    Raises if the parameters have not been through training.
    """
    if not params.trained:
        raise ValueError("attention teacher parameters are untrained")
    probs = softmax(_classify_forward(fmap, params, bypass_channel))
    label = int(np.argmax(probs))
    return TeacherLabel(ActivityClass(label), float(probs[label]), int(timestamp_ns))


def _scene_templates():
    rng = np.random.default_rng(_SCENE_SEED)
    return rng.normal(0.0, 1.0, (N_CLASSES, SCENE_CHANNELS, SCENE_SIZE, SCENE_SIZE))


_TEMPLATES = _scene_templates()


def scene_descriptor(activity: ActivityClass, rng: np.random.Generator, noise: float = 0.6) -> np.ndarray:
    """Synthetic per-activity feature map: class template plus noise."""
    c = int(ActivityClass(activity))
    return _TEMPLATES[c] + noise * rng.normal(size=_TEMPLATES[c].shape)


def _train_forward_backward(maps: np.ndarray, labels: np.ndarray, params: AttentionBlockParams):
    """Vectorized loss and analytic gradients for fc1/fc2/head.

    maps (B, C, H, W). The conv kernel is treated as fixed; when the spatial
    branch is enabled gradients still flow through it to the FC layers.
    """
    b, c_ch, hh, ww = maps.shape
    g = maps.mean(axis=(2, 3))
    u = g @ params.fc1_w.T + params.fc1_b
    a = np.maximum(u, 0.0)
    v = a @ params.fc2_w.T + params.fc2_b
    s = 1.0 / (1.0 + np.exp(-np.clip(v, -60, 60)))
    f1 = s[:, :, None, None] * maps
    if params.use_spatial:
        avg = f1.mean(axis=1)
        am = f1.argmax(axis=1)
        mx = np.take_along_axis(f1, am[:, None], axis=1)[:, 0]
        q = np.empty((b, hh, ww))
        for i in range(b):
            q[i] = (
                correlate2d(avg[i], params.conv_kernel[0], mode="same", boundary="fill")
                + correlate2d(mx[i], params.conv_kernel[1], mode="same", boundary="fill")
                + params.conv_b
            )
        ss = 1.0 / (1.0 + np.exp(-np.clip(q, -60, 60)))
        f2 = ss[:, None] * f1
    else:
        f2 = f1
    pooled = f2.mean(axis=(2, 3))
    logits = pooled @ params.head_w.T + params.head_b
    probs = softmax(logits)
    idx = np.arange(b)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, labels], 1e-300))))

    d_logits = probs.copy()
    d_logits[idx, labels] -= 1.0
    d_logits /= b
    g_head_w = d_logits.T @ pooled
    g_head_b = d_logits.sum(axis=0)
    d_pooled = d_logits @ params.head_w
    d_f2 = np.broadcast_to(d_pooled[:, :, None, None], f2.shape) / (hh * ww)
    if params.use_spatial:
        d_f1 = ss[:, None] * d_f2
        d_ss = (f1 * d_f2).sum(axis=1)
        d_q = d_ss * ss * (1.0 - ss)
        d_avg = np.empty_like(d_q)
        d_max = np.empty_like(d_q)
        for i in range(b):
            d_avg[i] = convolve2d(d_q[i], params.conv_kernel[0], mode="same", boundary="fill")
            d_max[i] = convolve2d(d_q[i], params.conv_kernel[1], mode="same", boundary="fill")
        d_f1 = d_f1 + d_avg[:, None] / c_ch
        scatter = np.zeros_like(f1)
        np.put_along_axis(scatter, am[:, None], d_max[:, None], axis=1)
        d_f1 = d_f1 + scatter
    else:
        d_f1 = d_f2
    d_s = (maps * d_f1).sum(axis=(2, 3))
    d_v = d_s * s * (1.0 - s)
    g_fc2_w = d_v.T @ a
    g_fc2_b = d_v.sum(axis=0)
    d_a = d_v @ params.fc2_w
    d_u = d_a * (u > 0)
    g_fc1_w = d_u.T @ g
    g_fc1_b = d_u.sum(axis=0)
    grads = np.concatenate(
        [g_fc1_w.ravel(), g_fc1_b, g_fc2_w.ravel(), g_fc2_b, g_head_w.ravel(), g_head_b]
    )
    return loss, grads


def _pack(params: AttentionBlockParams) -> np.ndarray:
    return np.concatenate(
        [
            params.fc1_w.ravel(),
            params.fc1_b,
            params.fc2_w.ravel(),
            params.fc2_b,
            params.head_w.ravel(),
            params.head_b,
        ]
    )


def _unpack(flat: np.ndarray, like: AttentionBlockParams) -> AttentionBlockParams:
    pos = 0
    out = {}
    for name in ("fc1_w", "fc1_b", "fc2_w", "fc2_b", "head_w", "head_b"):
        shape = getattr(like, name).shape
        n = int(np.prod(shape))
        out[name] = flat[pos : pos + n].reshape(shape)
        pos += n
    return replace(like, **out)


def train_attention_teacher(
    params: AttentionBlockParams,
    maps: np.ndarray,
    labels: np.ndarray,
    epochs: int = 60,
    learning_rate: float = 0.02,
    batch_size: int = 64,
    seed: int = 0,
):
    """Adam training of the FC layers and head; conv kernel stays fixed.

    Returns (trained params, per-epoch loss history).
    """
    maps = np.asarray(maps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if maps.ndim != 4 or maps.shape[0] != labels.shape[0] or maps.shape[0] == 0:
        raise ValueError("maps must be (B, C, H, W) aligned with labels")
    rng = np.random.default_rng(seed)
    hyper = AdamHyper(learning_rate=learning_rate)
    flat = _pack(params)
    state = AdamState.zeros(flat.shape)
    current = params
    history = []
    n = maps.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            loss, grads = _train_forward_backward(maps[sel], labels[sel], current)
            total += loss * sel.size
            flat, state = adam_step(flat, grads, state, hyper)
            current = _unpack(flat, current)
        history.append(total / n)
    return replace(current, trained=True), history


class AttentionTeacher:
    """Label source backed by the attention classifier on scene descriptors.

    Stands in for a vision detector: it renders the scene descriptor of the
    true activity (what a camera would observe) and classifies it. The
    rendered scene persists for hold_ms while the activity is unchanged,
    mirroring how consecutive camera frames show the same pose.
    """

    def __init__(
        self,
        params: AttentionBlockParams,
        label_rate_hz: float = 30.0,
        seed: int = 0,
        noise: float = 0.6,
        hold_ms: float = 2000.0,
    ):
        if not params.trained:
            raise ValueError("attention teacher requires trained parameters")
        self.params = params
        self.label_rate_hz = float(label_rate_hz)
        self.noise = float(noise)
        self.hold_ms = float(hold_ms)
        self._rng = np.random.default_rng(seed)
        self._held_class: int | None = None
        self._held: TeacherLabel | None = None
        self._hold_until_ns = -(1 << 62)

    def label_for(self, true_class: ActivityClass, timestamp_ns: int) -> TeacherLabel:
        true = int(ActivityClass(true_class))
        ts = int(timestamp_ns)
        if self._held_class != true or ts >= self._hold_until_ns:
            fmap = scene_descriptor(ActivityClass(true), self._rng, self.noise)
            self._held = attention_teacher_classify(fmap, self.params, ts)
            self._held_class = true
            self._hold_until_ns = ts + int(self.hold_ms * 1e6)
        return TeacherLabel(self._held.label, self._held.confidence, ts)
