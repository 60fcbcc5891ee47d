"""Dense-array primitives shared by every other module.

Arrays are plain ``numpy.ndarray`` objects. Everything here is a pure
function of its inputs; randomness is carried explicitly by :class:`Rng`.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {name}")
    return x


class Rng:
    """Seeded random source backed by the counter-based Philox generator.

    Child streams are derived from ``(seed, *path)`` through numpy's
    ``SeedSequence``, so a stream only depends on its path and never on how
    many draws were taken elsewhere. Philox4x64-10 is platform independent.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.path]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *path: int) -> "Rng":
        return Rng(self.seed, *self.path, *path)

    @property
    def counter(self) -> int:
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)


# -- activations ------------------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float) if not isinstance(v, np.ndarray) else v
    if v.size == 0:
        raise ValueError("softmax of an empty array")
    check_finite(v, "softmax input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    if v.size == 0:
        raise ValueError("log_softmax of an empty array")
    check_finite(v, "log_softmax input")
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def masked_softmax(scores: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax where ``mask == 0`` entries behave as scores of minus infinity.

    Masked entries come out as exact zeros. A slice with no unmasked entry is
    an error.
    """
    keep = mask > 0
    if not np.all(keep.any(axis=axis)):
        raise ValueError("softmax over a fully masked slice")
    check_finite(scores, "softmax input")
    peak = np.where(keep, scores, -np.inf).max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, scores - peak, 0.0)), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(v: np.ndarray) -> np.ndarray:
    check_finite(v, "sigmoid input")
    return fast_sigmoid(v)


def fast_sigmoid(v: np.ndarray) -> np.ndarray:
    """Unchecked logistic function for inner loops (never overflows)."""
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def tanh(v: np.ndarray) -> np.ndarray:
    check_finite(v, "tanh input")
    return np.tanh(v)


# -- initialization, clipping, dropout --------------------------------------


def uniform_init(shape, rng: Rng, half_width: float = 0.04, dtype=np.float64) -> np.ndarray:
    if half_width <= 0:
        raise ValueError("half_width must be positive")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ValueError(f"non-positive extent in shape {shape}")
    return rng.uniform(-half_width, half_width, shape).astype(dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    # sum in name order so the result does not depend on dict insertion order
    for name, g in sorted(grads.items()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_global_norm(grads: Mapping[str, np.ndarray], c: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``c``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    if norm <= c:
        return dict(grads), norm
    scale = c / norm
    return {k: g * scale for k, g in grads.items()}, norm


def dropout_mask(shape, rng: Rng | None, rate: float = 0.5, training: bool = True, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: kept entries hold ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return np.where(keep, 1.0 / (1.0 - rate), 0.0).astype(dtype)


# -- finite-difference oracle ------------------------------------------------


def numerical_grad(f: Callable[[dict], float], params: dict[str, np.ndarray], name: str,
                   epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``params[name]``.

    Entries are perturbed in place and restored afterwards.
    """
    x = params[name]
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(params)
        flat[i] = orig - epsilon
        fm = f(params)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite while perturbing {name}[{i}]")
        gflat[i] = (fp - fm) / (2 * np.asarray(epsilon, dtype=x.dtype))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[dict], float], params: dict[str, np.ndarray],
               grads: Mapping[str, np.ndarray], epsilon: float = 1e-5,
               names=None, report: dict | None = None, extended: bool = True) -> float:
    """Compare analytic ``grads`` of scalar ``f`` against central differences.

    Returns the largest ``|a - n| / max(|a|, |n|, 1e-8)`` over every checked
    entry. Pass a dict as ``report`` to collect per-parameter maxima.

    With ``extended`` the differences are taken on a ``np.longdouble`` copy of
    ``params`` (80-bit on x86), so ``f`` must compute in the dtype of the
    arrays it is given. Plain float64 differencing cannot resolve gradient
    entries much below ``|f| * 1e-11`` at ``epsilon = 1e-5``.
    """
    ftype = np.longdouble if extended else np.float64
    work = {k: np.array(v, dtype=ftype) for k, v in params.items()}
    worst = 0.0
    for name in names if names is not None else grads:
        num = numerical_grad(f, work, name, epsilon)
        ana = np.asarray(grads[name], dtype=np.float64)
        if ana.shape != num.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {ana.shape} vs {num.shape}")
        err = float(relative_error(ana, num).max()) if num.size else 0.0
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
