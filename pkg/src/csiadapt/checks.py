"""Machine-checkable property suites behind the gradcheck / synccheck /
protofuzz commands.

Each check returns a plain dict report with a boolean "passed" plus the
numbers that justify it, so the CLI can emit it as JSON and exit non-zero
on failure. The same functions back the acceptance tests.
"""

from __future__ import annotations

import time

import numpy as np

from . import teacher as teacher_mod
from .gru import bptt_gradients, init_parameters
from .protocol import (
    Ack,
    LabeledBatch,
    ProtocolError,
    UpdateRequest,
    WeightPackage,
    decode_frame,
    encode,
)
from .sync import SyncConfig, pair_streams

__all__ = ["gradcheck_report", "protofuzz_report", "synccheck_report"]


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck_report(
    instances: int = 10,
    seed: int = 0,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    gradient_fn=None,
    include_attention: bool = True,
) -> dict:
    """Central finite differences vs analytic gradients.

    Small GRU instances (D=3, H=4, C=3, T=5) plus the attention
    classifier's FC/head path. gradient_fn lets tests inject a deliberately
    broken gradient to prove the check catches it.
    """
    gradient_fn = gradient_fn or bptt_gradients
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    t0 = time.perf_counter()
    for i in range(instances):
        params = init_parameters(3, (4, 4, 4), n_classes=3, seed=int(rng.integers(1 << 31)))
        batch = [
            (rng.normal(size=(5, 3)), int(rng.integers(0, 3)))
            for _ in range(3)
        ]
        analytic, _loss = gradient_fn(batch, params)
        aflat = analytic.flatten()
        flat = params.flatten()
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            up = flat.copy()
            up[j] += step
            dn = flat.copy()
            dn[j] -= step
            _, lu = bptt_gradients(batch, params.unflatten(up))
            _, ld = bptt_gradients(batch, params.unflatten(dn))
            numeric[j] = (lu - ld) / (2.0 * step)
        err = float(_relative_errors(aflat, numeric).max())
        worst = max(worst, err)
        details.append({"instance": i, "max_rel_err": err})

    attention_err = None
    if include_attention:
        params = teacher_mod.init_attention_params(seed=seed)
        maps = rng.normal(size=(6, 4, 8, 8))
        labels = rng.integers(0, 8, 6)
        _loss, grads = teacher_mod._train_forward_backward(maps, labels, params)
        flat = teacher_mod._pack(params)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            up = flat.copy()
            up[j] += step
            dn = flat.copy()
            dn[j] -= step
            lu, _ = teacher_mod._train_forward_backward(maps, labels, teacher_mod._unpack(up, params))
            ld, _ = teacher_mod._train_forward_backward(maps, labels, teacher_mod._unpack(dn, params))
            numeric[j] = (lu - ld) / (2.0 * step)
        attention_err = float(_relative_errors(grads, numeric).max())
        worst = max(worst, attention_err)

    return {
        "check": "gradcheck",
        "passed": worst < tolerance,
        "max_rel_err": worst,
        "tolerance": tolerance,
        "instances": details,
        "attention_max_rel_err": attention_err,
        "runtime_s": time.perf_counter() - t0,
    }


def _brute_force_pairs(csi_times, label_times, eps):
    """Quadratic nearest-within-eps oracle; ties go to the earlier label."""
    out = []
    unmatched = 0
    for t in csi_times:
        best, best_d = None, None
        for j, lt in enumerate(label_times):
            d = abs(int(t) - int(lt))
            if best_d is None or d < best_d:
                best, best_d = j, d
        if best_d is not None and best_d <= eps:
            out.append((int(t), int(label_times[best])))
        else:
            unmatched += 1
    return out, unmatched


def synccheck_report(trials: int = 100, seed: int = 0) -> dict:
    """Randomized stream pairs vs the brute-force pairing oracle.

    Rates 10-200 Hz, random offsets and jitter; also asserts that no
    emitted pair violates the epsilon bound.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    failures = []
    for trial in range(trials):
        rate_a = rng.uniform(10, 200)
        rate_b = rng.uniform(10, 200)
        duration = rng.uniform(3.0, 8.0)
        offset = int(rng.integers(-40_000_000, 40_000_000))
        jitter = rng.uniform(0, 3_000_000)
        eps = int(rng.integers(1_000_000, 60_000_000))
        csi_t = np.sort(
            (np.arange(int(rate_a * duration)) * 1e9 / rate_a + rng.normal(0, jitter, int(rate_a * duration))).astype(np.int64)
        )
        lab_t = np.sort(
            (np.arange(int(rate_b * duration)) * 1e9 / rate_b + offset + rng.normal(0, jitter, int(rate_b * duration))).astype(np.int64)
        )
        lab_t = np.unique(lab_t)
        cfg = SyncConfig(epsilon_ns=eps)
        pairs, unmatched = pair_streams(
            [(int(t), i) for i, t in enumerate(csi_t)],
            [(int(t), i) for i, t in enumerate(lab_t)],
            cfg,
        )
        got = [(p.csi_timestamp_ns, p.label_timestamp_ns) for p in pairs]
        want, want_unmatched = _brute_force_pairs(csi_t, lab_t, eps)
        bound_ok = all(p.delta_ns <= eps for p in pairs)
        if got != want or unmatched != want_unmatched or not bound_ok:
            failures.append(trial)
    return {
        "check": "synccheck",
        "passed": not failures,
        "trials": trials,
        "failed_trials": failures,
        "runtime_s": time.perf_counter() - t0,
    }


def _random_message(rng: np.random.Generator):
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return UpdateRequest(int(rng.integers(0, 1 << 16)), float(rng.uniform(0, 1)))
    if kind == 1:
        return Ack(int(rng.integers(0, 1 << 16)), int(rng.integers(0, 2)))
    if kind == 2:
        count = int(rng.integers(0, 4))
        window = int(rng.integers(1, 6)) if count else 0
        dim = int(rng.integers(1, 6)) if count else 0
        return LabeledBatch(
            tuple(int(v) for v in rng.integers(0, 8, count)),
            rng.normal(size=(count, window, dim)),
        )
    return WeightPackage(int(rng.integers(0, 1 << 16)), bytes(rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8)))


def protofuzz_report(cases: int = 10_000, seed: int = 0) -> dict:
    """Random and mutated frames through the decoder: no crashes allowed.

    Also counts encode/decode round-trips on randomly generated messages.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    outcomes = {"valid": 0, "error": 0, "incomplete": 0}
    crashes = 0
    roundtrip_failures = 0
    for i in range(cases):
        mode = i % 3
        if mode == 0:
            data = bytes(rng.integers(0, 256, int(rng.integers(0, 80)), dtype=np.uint8))
        else:
            msg = _random_message(rng)
            data = bytearray(encode(msg))
            if mode == 1 and len(data) > 0:  # mutate one byte
                pos = int(rng.integers(0, len(data)))
                data[pos] ^= int(rng.integers(1, 256))
            elif mode == 2:  # truncate
                data = data[: int(rng.integers(0, len(data)))]
            data = bytes(data)
        try:
            got = decode_frame(data)
        except ProtocolError:
            outcomes["error"] += 1
        except Exception:
            crashes += 1
        else:
            outcomes["incomplete" if got is None else "valid"] += 1
    rt_rng = np.random.default_rng(seed + 1)
    for _ in range(cases):
        msg = _random_message(rt_rng)
        enc = encode(msg)
        dec, _ver, used = decode_frame(enc)
        if used != len(enc) or encode(dec) != enc:
            roundtrip_failures += 1
    return {
        "check": "protofuzz",
        "passed": crashes == 0 and roundtrip_failures == 0,
        "cases": cases,
        "crashes": crashes,
        "roundtrip_failures": roundtrip_failures,
        "outcomes": outcomes,
        "runtime_s": time.perf_counter() - t0,
    }
