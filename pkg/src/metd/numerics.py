"""Dense float64 vector kernels used by every other module.

All public functions validate their inputs (finite entries, matching
shapes) and raise :class:`ContractViolation` or :class:`ZeroNormError`
on bad data instead of propagating NaNs.  Everything here is pure and
deterministic: the same bits in give the same bits out.
"""

import math

import numpy as np

from .errors import ContractViolation, ZeroNormError


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractViolation(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return arr


def vector_norm(values, name: str = "vector") -> float:
    """Euclidean norm of a 1-D vector; raises ZeroNormError on zero input."""
    arr = as_vector(values, name)
    norm = math.sqrt(float(np.dot(arr, arr)))
    if norm == 0.0:
        raise ZeroNormError(f"{name} has zero norm")
    return norm


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    The clamp removes the tiny floating-point excursions beyond +/-1 that
    parallel vectors can produce, so downstream arccos and comparisons
    never see an out-of-range value.  Exactly commutative:
    ``cosine_similarity(a, b) == cosine_similarity(b, a)`` bit for bit,
    because both the dot product and the norm product are.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ContractViolation(
            f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}"
        )
    norm_a = vector_norm(va, "a")
    norm_b = vector_norm(vb, "b")
    raw = float(np.dot(va, vb)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, raw))


def log_sum_exp(values) -> float:
    """log(sum(exp(x_i))) computed without overflow.

    Uses the max-shift identity, so inputs anywhere in the float64 range
    are safe.  For a single element the result is that element exactly.
    """
    arr = as_vector(values, "values")
    shift = float(np.max(arr))
    return shift + math.log(float(np.sum(np.exp(arr - shift))))


def stable_softmax(values) -> np.ndarray:
    """Softmax via the log-sum-exp shift; entries in [0, 1], sum ~ 1.

    Shift invariant to within rounding: adding a constant to every input
    moves each output by at most a few ulps.
    """
    arr = as_vector(values, "values")
    return np.exp(arr - log_sum_exp(arr))
