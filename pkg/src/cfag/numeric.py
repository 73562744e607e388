"""Dense numeric primitives: Adam, a central-difference gradient oracle,
seeded sampling, and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_MAGIC = b"CFAGCKPT"
CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up where finite values are required."""


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """PCG64 generator. Passing a Generator returns it unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.default_rng(seed)


def seeded_uniform(seed: int | np.random.Generator, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Draw ``n`` samples uniform over ``[low, high)`` from a PCG64 stream."""
    return make_rng(seed).uniform(low, high, size=n)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if lr <= 0:
        raise ValueError("lr must be positive")
    check_finite("gradient", grads)

    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)

    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts the estimate to a subset of flat coordinates; the
    remaining entries of the result are left at zero. ``x`` is perturbed in
    place and restored before returning.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    coords = range(flat_x.size) if indices is None else indices
    for i in coords:
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f(x)
        flat_x[i] = orig - h
        f_minus = f(x)
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


# Layout: magic, u32 version, u32 count, then per matrix
#   u16 name length, utf-8 name, u32 rows, u32 cols, rows*cols little-endian f64.


def save_checkpoint(path: str | Path, matrices: Mapping[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(matrices))]
    for name, arr in matrices.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"{name}: only 1-D/2-D arrays can be checkpointed")
        check_finite(name, arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after payload")
    return out
