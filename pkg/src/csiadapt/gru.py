"""Three-layer GRU sequence classifier with exact-gradient BPTT training.

Gate equations per step (update z, reset r, candidate h~):

    z = sigmoid(W_z x + U_z h_prev + b_z)
    r = sigmoid(W_r x + U_r h_prev + b_r)
    h~ = tanh(W_h x + U_h (r * h_prev) + b_h)
    h = (1 - z) * h_prev + z * h~

Layers are stacked (layer l consumes layer l-1 outputs), the softmax head
reads the top layer's final hidden state, and the training loss is the
cross-entropy at the last step of each fixed-length window. Gradients are
analytic and verified against central finite differences in the test
suite; training is bit-for-bit deterministic under a fixed seed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import AdamHyper, AdamState, adam_step, softmax

__all__ = [
    "GruLayerParams",
    "GruParameters",
    "Prediction",
    "TrainConfig",
    "bptt_gradients",
    "fine_tune",
    "forward_sequence",
    "gru_cell_forward",
    "init_parameters",
    "load_checkpoint",
    "predict_batch",
    "predict_with_confidence",
    "save_checkpoint",
]

CHECKPOINT_MAGIC = b"STARW"
CHECKPOINT_VERSION = 1

# serialization order of the per-layer tensors, shared by the checkpoint
# format and the flat parameter vector used by the optimizer
_LAYER_FIELDS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class GruLayerParams:
    """Learnable tensors of one GRU layer (input dim D, hidden dim H)."""

    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        h, d = self.W_z.shape
        for name in _LAYER_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            want = (h,) if name.startswith("b") else ((h, h) if name.startswith("U") else (h, d))
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]


@dataclass(frozen=True)
class GruParameters:
    """Stacked GRU layers plus the softmax output head."""

    layers: tuple
    W_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        for prev, cur in zip(layers, layers[1:]):
            if cur.input_dim != prev.hidden_dim:
                raise ValueError(
                    f"layer input dim {cur.input_dim} != previous hidden {prev.hidden_dim}"
                )
        w_o = np.asarray(self.W_o, dtype=np.float64)
        b_o = np.asarray(self.b_o, dtype=np.float64)
        if w_o.ndim != 2 or w_o.shape[1] != layers[-1].hidden_dim:
            raise ValueError(f"W_o shape {w_o.shape} incompatible with hidden dim")
        if b_o.shape != (w_o.shape[0],):
            raise ValueError("b_o length must match W_o rows")
        object.__setattr__(self, "W_o", w_o)
        object.__setattr__(self, "b_o", b_o)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_classes(self) -> int:
        return self.W_o.shape[0]

    def tensors(self):
        """All tensors in serialization order."""
        out = []
        for layer in self.layers:
            out.extend(getattr(layer, name) for name in _LAYER_FIELDS)
        out.append(self.W_o)
        out.append(self.b_o)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def unflatten(self, flat: np.ndarray) -> "GruParameters":
        """Rebuild a parameter set of this structure from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        layers = []
        for layer in self.layers:
            vals = {}
            for name in _LAYER_FIELDS:
                shape = getattr(layer, name).shape
                n = int(np.prod(shape))
                vals[name] = flat[pos : pos + n].reshape(shape)
                pos += n
            layers.append(GruLayerParams(**vals))
        n = self.W_o.size
        w_o = flat[pos : pos + n].reshape(self.W_o.shape)
        pos += n
        b_o = flat[pos : pos + self.b_o.size]
        pos += self.b_o.size
        if pos != flat.size:
            raise ValueError("flat vector length does not match parameter count")
        return GruParameters(layers=tuple(layers), W_o=w_o, b_o=b_o)


def init_parameters(
    input_dim: int,
    hidden_dims=(32, 32, 32),
    n_classes: int = 8,
    seed: int = 0,
) -> GruParameters:
    """Seeded uniform(-k, k) init with k = 1/sqrt(H); biases zero."""
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for h in hidden_dims:
        k = 1.0 / np.sqrt(h)
        vals = {}
        for name in _LAYER_FIELDS:
            if name.startswith("b"):
                vals[name] = np.zeros(h)
            elif name.startswith("U"):
                vals[name] = rng.uniform(-k, k, (h, h))
            else:
                vals[name] = rng.uniform(-k, k, (h, d))
        layers.append(GruLayerParams(**vals))
        d = h
    k = 1.0 / np.sqrt(d)
    return GruParameters(
        layers=tuple(layers),
        W_o=rng.uniform(-k, k, (n_classes, d)),
        b_o=np.zeros(n_classes),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning configuration; defaults are the adaptation settings
    (50 epochs at a fixed learning rate of 1e-4)."""

    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 4
    adam: AdamHyper = field(default_factory=AdamHyper)
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class Prediction:
    """Predicted class with its max-softmax confidence and full distribution."""

    label: int
    confidence: float
    probabilities: np.ndarray


def gru_cell_forward(x_t: np.ndarray, h_prev: np.ndarray, layer: GruLayerParams) -> np.ndarray:
    """Single GRU step for one vector; see the module equations."""
    x = np.asarray(x_t, dtype=np.float64)
    h = np.asarray(h_prev, dtype=np.float64)
    if x.shape != (layer.input_dim,) or h.shape != (layer.hidden_dim,):
        raise ValueError(
            f"dims mismatch: x {x.shape} vs D={layer.input_dim}, "
            f"h {h.shape} vs H={layer.hidden_dim}"
        )
    z = _sigmoid(layer.W_z @ x + layer.U_z @ h + layer.b_z)
    r = _sigmoid(layer.W_r @ x + layer.U_r @ h + layer.b_r)
    h_bar = np.tanh(layer.W_h @ x + layer.U_h @ (r * h) + layer.b_h)
    return (1.0 - z) * h + z * h_bar


def _layer_forward(x_seq: np.ndarray, layer: GruLayerParams, want_cache: bool):
    """Run one layer over a (T, B, D) sequence. Returns outputs and cache."""
    t_len, batch, _ = x_seq.shape
    h = np.zeros((batch, layer.hidden_dim))
    outs = np.empty((t_len, batch, layer.hidden_dim))
    cache = None
    if want_cache:
        cache = {
            "h_prev": np.empty_like(outs),
            "z": np.empty_like(outs),
            "r": np.empty_like(outs),
            "h_bar": np.empty_like(outs),
            "rh": np.empty_like(outs),
        }
    for t in range(t_len):
        x = x_seq[t]
        z = _sigmoid(x @ layer.W_z.T + h @ layer.U_z.T + layer.b_z)
        r = _sigmoid(x @ layer.W_r.T + h @ layer.U_r.T + layer.b_r)
        rh = r * h
        h_bar = np.tanh(x @ layer.W_h.T + rh @ layer.U_h.T + layer.b_h)
        h_new = (1.0 - z) * h + z * h_bar
        if want_cache:
            cache["h_prev"][t] = h
            cache["z"][t] = z
            cache["r"][t] = r
            cache["h_bar"][t] = h_bar
            cache["rh"][t] = rh
        outs[t] = h_new
        h = h_new
    return outs, cache


def _forward_stack(x_batch: np.ndarray, params: GruParameters, want_cache: bool):
    """All layers over a (B, T, D) batch; returns top outputs (T, B, H) and caches."""
    seq = np.ascontiguousarray(np.swapaxes(np.asarray(x_batch, dtype=np.float64), 0, 1))
    caches = []
    inputs = []
    for layer in params.layers:
        inputs.append(seq)
        seq, cache = _layer_forward(seq, layer, want_cache)
        caches.append(cache)
    return seq, inputs, caches


def forward_sequence(x_seq: np.ndarray, params: GruParameters):
    """Per-step class probabilities and final hidden states for one sequence.

    x_seq has shape (T, D); h_0 = 0 for every layer. Returns
    (probs (T, C), final_hiddens list of (H,) per layer).
    """
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("input sequence must be non-empty with shape (T, D)")
    seq = x[:, None, :]
    finals = []
    for layer in params.layers:
        seq, _ = _layer_forward(seq, layer, want_cache=False)
        finals.append(seq[-1, 0].copy())
    logits = seq[:, 0, :] @ params.W_o.T + params.b_o
    return softmax(logits), finals


def predict_with_confidence(x_seq: np.ndarray, params: GruParameters) -> Prediction:
    """Classify one window from its final-step probabilities."""
    probs, _ = forward_sequence(x_seq, params)
    p_last = probs[-1]
    label = int(np.argmax(p_last))
    return Prediction(label=label, confidence=float(p_last[label]), probabilities=p_last)


def predict_batch(x_batch: np.ndarray, params: GruParameters, chunk: int = 256):
    """Vectorized final-step prediction for a (B, T, D) batch.

    Returns (labels (B,), confidences (B,), probs (B, C)).
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError("batch must be non-empty with shape (B, T, D)")
    all_probs = []
    for start in range(0, x.shape[0], chunk):
        top, _, _ = _forward_stack(x[start : start + chunk], params, want_cache=False)
        logits = top[-1] @ params.W_o.T + params.b_o
        all_probs.append(softmax(logits))
    probs = np.concatenate(all_probs)
    labels = np.argmax(probs, axis=1)
    return labels, probs[np.arange(len(labels)), labels], probs


def _backward_stack(dtop_last, inputs, caches, params: GruParameters):
    """Backprop a gradient at the top layer's final step down the stack.

    dtop_last: (B, H) gradient w.r.t. the top layer's final hidden state.
    Returns per-tensor gradient sums in serialization order (list of arrays).
    """
    t_len = inputs[0].shape[0]
    batch = dtop_last.shape[0]
    grads = [np.zeros_like(t) for t in params.tensors()[:-2]]
    dseq = None  # (T, B, H) gradient w.r.t. this layer's output sequence
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        cache = caches[li]
        x_seq = inputs[li]
        base = li * len(_LAYER_FIELDS)
        g = {name: grads[base + i] for i, name in enumerate(_LAYER_FIELDS)}
        dx_seq = np.zeros_like(x_seq)
        dh = np.zeros((batch, layer.hidden_dim))
        for t in range(t_len - 1, -1, -1):
            if li == len(params.layers) - 1 and t == t_len - 1:
                dh = dh + dtop_last
            if dseq is not None:
                dh = dh + dseq[t]
            h_prev = cache["h_prev"][t]
            z = cache["z"][t]
            r = cache["r"][t]
            h_bar = cache["h_bar"][t]
            rh = cache["rh"][t]
            x = x_seq[t]

            dz = dh * (h_bar - h_prev)
            da_h = dh * z * (1.0 - h_bar * h_bar)
            dh_prev = dh * (1.0 - z)
            drh = da_h @ layer.U_h
            dh_prev += drh * r
            dr = drh * h_prev
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dh_prev += da_z @ layer.U_z + da_r @ layer.U_r

            g["W_z"] += da_z.T @ x
            g["U_z"] += da_z.T @ h_prev
            g["b_z"] += da_z.sum(axis=0)
            g["W_r"] += da_r.T @ x
            g["U_r"] += da_r.T @ h_prev
            g["b_r"] += da_r.sum(axis=0)
            g["W_h"] += da_h.T @ x
            g["U_h"] += da_h.T @ rh
            g["b_h"] += da_h.sum(axis=0)

            dx_seq[t] = da_z @ layer.W_z + da_r @ layer.W_r + da_h @ layer.W_h
            dh = dh_prev
        dseq = dx_seq
    return grads


def _group_bptt(x_batch: np.ndarray, labels: np.ndarray, params: GruParameters):
    """Gradient sums and summed loss for one same-length (B, T, D) group."""
    top, inputs, caches = _forward_stack(x_batch, params, want_cache=True)
    h_last = top[-1]
    logits = h_last @ params.W_o.T + params.b_o
    probs = softmax(logits)
    batch = x_batch.shape[0]
    idx = np.arange(batch)
    loss_sum = float(-np.sum(np.log(probs[idx, labels])))
    d_logits = probs.copy()
    d_logits[idx, labels] -= 1.0
    dW_o = d_logits.T @ h_last
    db_o = d_logits.sum(axis=0)
    dh_last = d_logits @ params.W_o
    grads = _backward_stack(dh_last, inputs, caches, params)
    grads.extend([dW_o, db_o])
    return grads, loss_sum


def bptt_gradients(batch, params: GruParameters):
    """Exact gradients of the mean final-step cross-entropy over a batch.

    batch is a sequence of (X (T, D), label) pairs; sequences of different
    lengths are grouped internally. Returns (GruParameters-shaped gradient
    bundle, mean loss).
    """
    items = []
    for x, y in batch:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("each sequence must be non-empty with shape (T, D)")
        y = int(y)
        if not (0 <= y < params.n_classes):
            raise ValueError(f"label {y} outside 0..{params.n_classes - 1}")
        items.append((x, y))
    if not items:
        raise ValueError("batch must be non-empty")
    by_len: dict[int, list[int]] = {}
    for i, (x, _) in enumerate(items):
        by_len.setdefault(x.shape[0], []).append(i)
    total = len(items)
    grad_sums = [np.zeros_like(t) for t in params.tensors()]
    loss_sum = 0.0
    for t_len in sorted(by_len):
        idx = by_len[t_len]
        xs = np.stack([items[i][0] for i in idx])
        ys = np.array([items[i][1] for i in idx])
        grads, loss = _group_bptt(xs, ys, params)
        for acc, g in zip(grad_sums, grads):
            acc += g
        loss_sum += loss
    mean_grads = [g / total for g in grad_sums]
    return params.unflatten(np.concatenate([g.ravel() for g in mean_grads])), loss_sum / total


def fine_tune(params: GruParameters, dataset, config: TrainConfig):
    """Adam/BPTT training loop; returns (new params, per-epoch loss history).

    dataset items are (X, label) pairs or objects with .features/.label.
    The input parameters are not mutated; the whole run is deterministic
    under config.seed.
    """
    items = []
    for sample in dataset:
        if hasattr(sample, "features"):
            items.append((np.asarray(sample.features, dtype=np.float64), int(sample.label)))
        else:
            x, y = sample
            items.append((np.asarray(x, dtype=np.float64), int(y)))
    if not items:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(config.seed)
    hyper = replace(config.adam, learning_rate=config.learning_rate)
    flat = params.flatten()
    state = AdamState.zeros(flat.shape)
    current = params
    history = []
    n = len(items)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            chunk = [items[i] for i in order[start : start + config.batch_size]]
            grads, loss = bptt_gradients(chunk, current)
            epoch_loss += loss * len(chunk)
            gflat = grads.flatten()
            if config.clip_norm is not None:
                norm = float(np.linalg.norm(gflat))
                if norm > config.clip_norm:
                    gflat = gflat * (config.clip_norm / norm)
            flat, state = adam_step(flat, gflat, state, hyper)
            current = params.unflatten(flat)
        history.append(epoch_loss / n)
    return current, history


def save_checkpoint(params: GruParameters) -> bytes:
    """Serialize parameters to the little-endian STARW checkpoint format.

    Header {magic, version u16, layer count u8, input dim u16, per-layer
    hidden u16, classes u16}, raw float64 tensors in fixed order, then a
    CRC32 of the payload. Round-trips bit-exactly.
    """
    dims = [params.input_dim] + [l.hidden_dim for l in params.layers] + [params.n_classes]
    head = CHECKPOINT_MAGIC + struct.pack("<HB", CHECKPOINT_VERSION, len(params.layers))
    head += struct.pack(f"<{len(dims)}H", *dims)
    payload = b"".join(np.ascontiguousarray(t).astype("<f8").tobytes() for t in params.tensors())
    return head + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def load_checkpoint(data: bytes) -> GruParameters:
    """Inverse of save_checkpoint; verifies magic, version and CRC32."""
    if len(data) < len(CHECKPOINT_MAGIC) + 3:
        raise ValueError("checkpoint too short")
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:5]!r}")
    version, n_layers = struct.unpack_from("<HB", data, 5)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    dims = struct.unpack_from(f"<{n_layers + 2}H", data, off)
    off += 2 * (n_layers + 2)
    input_dim, hidden, classes = dims[0], dims[1:-1], dims[-1]
    payload = data[off:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint CRC mismatch")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=pos * 8).reshape(shape)
        pos += n
        return arr.astype(np.float64)

    layers = []
    d = input_dim
    for h in hidden:
        vals = {}
        for name in _LAYER_FIELDS:
            shape = (h,) if name.startswith("b") else ((h, h) if name.startswith("U") else (h, d))
            vals[name] = take(shape)
        layers.append(GruLayerParams(**vals))
        d = h
    w_o = take((classes, d))
    b_o = take((classes,))
    if pos * 8 != len(payload):
        raise ValueError("checkpoint payload length mismatch")
    return GruParameters(layers=tuple(layers), W_o=w_o, b_o=b_o)
