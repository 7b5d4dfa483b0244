"""Stateless numerical kernels shared by every other module.

Activations, stable softmax, min-max normalization, single-frame magnitude
spectra, and a bias-corrected Adam step. Everything is float64 and pure;
adam_step consumes and returns its state instead of mutating it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AdamHyper",
    "AdamState",
    "adam_step",
    "check_finite",
    "magnitude_spectrum",
    "minmax_normalize",
    "sigmoid",
    "softmax",
]


def check_finite(values: np.ndarray, name: str = "values") -> np.ndarray:
    """Return ``values`` as a float64/complex128 array, rejecting NaN/Inf."""
    arr = np.asarray(values)
    if arr.dtype.kind == "c":
        arr = arr.astype(np.complex128)
    else:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite (found NaN or Inf)")
    return arr


def sigmoid(x):
    """Logistic function 1/(1+exp(-x)), elementwise, without overflow.

    Uses the two-branch form so large negative inputs underflow toward +0
    instead of dividing by an overflowed exponential.
    """
    arr = check_finite(x, "sigmoid input")
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if np.ndim(x) == 0:
        return float(out)
    return out


def softmax(v: np.ndarray) -> np.ndarray:
    """Probability vector from logits, computed with max-subtraction."""
    arr = check_finite(v, "softmax input")
    if arr.size == 0:
        raise ValueError("softmax input must be non-empty")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Rescale so min maps to 0 and max to 1; constant input maps to all zeros."""
    arr = check_finite(v, "minmax input")
    if arr.size == 0:
        raise ValueError("minmax_normalize input must be non-empty")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        # degenerate: no spread carries no information, encode as zeros
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def magnitude_spectrum(samples: np.ndarray) -> np.ndarray:
    """|DFT| of a complex vector, length preserved.

    result_k = |sum_n samples_n * exp(-2*pi*i*k*n/N)|. Computed via FFT;
    the contract is agreement with the naive O(N^2) DFT to 1e-9 relative.
    """
    arr = np.asarray(samples, dtype=np.complex128)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("magnitude_spectrum expects a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("magnitude_spectrum input must be finite")
    return np.abs(np.fft.fft(arr))


@dataclass(frozen=True)
class AdamHyper:
    """Adam hyperparameters (learning rate plus moment decay rates)."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if not (self.eps > 0):
            raise ValueError("eps must be > 0")


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates and the step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns (params', state')."""
    p = np.asarray(params, dtype=np.float64)
    g = check_finite(grads, "grads")
    if p.shape != g.shape or state.m.shape != p.shape or state.v.shape != p.shape:
        raise ValueError(
            f"shape mismatch: params {p.shape}, grads {g.shape}, "
            f"state m {state.m.shape}, v {state.v.shape}"
        )
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * g * g
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    new_params = p - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_params, AdamState(m=m, v=v, t=t)
