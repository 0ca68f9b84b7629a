"""Dense float64 vector arithmetic and diagonal-preconditioner norms.

Inputs are validated eagerly: wrong dimensions and non-finite entries raise
instead of propagating NaN through a simulation.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    DomainError,
    EmptyAggregationError,
    NonFiniteError,
)

Array = np.ndarray

ELEMENTWISE_KINDS = ("square", "sqrt", "add-scalar", "reciprocal")


def as_vector(x, *, name: str = "vector") -> Array:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NonFiniteError(f"{name} has a non-finite entry at index {bad}")
    return arr


def as_positive_diag(g, *, name: str = "diag") -> Array:
    """Coerce to a strictly positive 1-D float64 diagonal."""
    arr = as_vector(g, name=name)
    if np.any(arr <= 0.0):
        bad = int(np.flatnonzero(arr <= 0.0)[0])
        raise DomainError(
            f"{name}[{bad}] = {arr[bad]!r} is not strictly positive", index=bad
        )
    return arr


def check_same_dim(a: Array, b: Array, *, names=("first", "second")) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"{names[0]} has dimension {a.shape[0]} but {names[1]} has {b.shape[0]}"
        )


def weighted_norm_sq(x, diag, *, inverse: bool = False) -> float:
    """Squared norm of ``x`` under a strictly positive diagonal weighting.

    Returns sum(diag * x**2), or sum(x**2 / diag) when ``inverse`` is set.
    Exactly zero iff ``x`` is the zero vector.
    """
    xv = as_vector(x, name="x")
    gv = as_positive_diag(diag)
    check_same_dim(xv, gv, names=("x", "diag"))
    if inverse:
        return float(np.dot(xv / gv, xv))
    return float(np.dot(xv * gv, xv))


def elementwise(kind: str, x, scalar: float | None = None) -> Array:
    """Element-wise square, sqrt, scalar addition, or reciprocal.

    ``sqrt`` requires nonnegative entries and ``reciprocal`` requires nonzero
    entries; violations report the first offending index.
    """
    xv = as_vector(x, name="x")
    if kind == "square":
        return xv * xv
    if kind == "sqrt":
        if np.any(xv < 0.0):
            bad = int(np.flatnonzero(xv < 0.0)[0])
            raise DomainError(f"sqrt of negative entry {xv[bad]!r} at index {bad}", index=bad)
        return np.sqrt(xv)
    if kind == "add-scalar":
        if scalar is None:
            raise DomainError("add-scalar requires a scalar argument")
        return xv + float(scalar)
    if kind == "reciprocal":
        if np.any(xv == 0.0):
            bad = int(np.flatnonzero(xv == 0.0)[0])
            raise DomainError(f"reciprocal of zero entry at index {bad}", index=bad)
        return 1.0 / xv
    raise DomainError(f"unknown element-wise op {kind!r}; expected one of {ELEMENTWISE_KINDS}")


def mean_update(updates: Sequence[Array]) -> Array:
    """Mean of the given vectors, accumulated in list order.

    The summation order is part of the contract: callers that need
    reproducible aggregation pass the list sorted by client id.
    """
    if len(updates) == 0:
        raise EmptyAggregationError("cannot average an empty list of updates")
    first = as_vector(updates[0], name="updates[0]")
    acc = first.copy()
    for i in range(1, len(updates)):
        v = as_vector(updates[i], name=f"updates[{i}]")
        check_same_dim(first, v, names=("updates[0]", f"updates[{i}]"))
        acc += v
    acc /= len(updates)
    return acc
