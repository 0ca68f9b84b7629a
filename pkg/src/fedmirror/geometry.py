"""Distance generators for mirror-descent server updates.

A generator packages a smooth strictly convex potential through its gradient
maps. The quadratic kind stores a strictly positive diagonal and has closed
forms for every operation. The custom kind supplies the maps as callables and
recovers step sizes by bracketed bisection on the strictly increasing slope
function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    BracketExpansionError,
    DegenerateDirectionError,
    FedMirrorError,
    NonFiniteError,
)
from .vectors import Array, as_positive_diag, as_vector, check_same_dim, weighted_norm_sq

_MAX_DOUBLINGS = 2 ** 10
_MAX_BISECTIONS = 200


@dataclass(frozen=True)
class QuadraticGenerator:
    """Potential 0.5 * sum(diag_k * w_k**2) with a strictly positive diagonal."""

    diag: Array

    def __post_init__(self):
        object.__setattr__(self, "diag", as_positive_diag(self.diag))


@dataclass(frozen=True)
class CustomGenerator:
    """Generator defined by explicit gradient maps.

    ``forward_map`` is the gradient of the potential, ``inverse_map`` its
    inverse, and ``dual_grad`` the gradient of the convex conjugate. For
    smooth strictly convex potentials on all of R^d the last two coincide,
    but both are taken explicitly so no numerical inversion is ever needed.
    ``potential`` and ``dual_potential`` are optional and unlock Bregman
    divergences and grid oracles; when given they must accept arrays of any
    shape and reduce over the last axis. ``strong_convexity`` is the modulus
    alpha used by validation probes.
    """

    forward_map: Callable[[Array], Array]
    inverse_map: Callable[[Array], Array]
    dual_grad: Callable[[Array], Array]
    strong_convexity: float
    potential: Callable[[Array], float] | None = None
    dual_potential: Callable[[Array], float] | None = None

    def __post_init__(self):
        if not self.strong_convexity > 0.0:
            raise FedMirrorError("strong_convexity must be positive")


DistanceGenerator = QuadraticGenerator | CustomGenerator


def identity_generator(dim: int) -> QuadraticGenerator:
    """Quadratic generator with unit diagonal (plain Euclidean geometry)."""
    return QuadraticGenerator(np.ones(dim))


def cosh_generator() -> CustomGenerator:
    """Hyperbolic-cosine potential, sum(cosh(w_k)).

    The forward map is sinh, its inverse is asinh, and the conjugate
    evaluates to theta * asinh(theta) - sqrt(1 + theta**2) per coordinate.
    Strongly convex with modulus 1 since cosh'' >= 1 everywhere.
    """

    def _potential(w):
        w = np.asarray(w, dtype=np.float64)
        return np.sum(np.cosh(w), axis=-1)

    def _dual_potential(theta):
        t = np.asarray(theta, dtype=np.float64)
        return np.sum(t * np.arcsinh(t) - np.sqrt(1.0 + t * t), axis=-1)

    return CustomGenerator(
        forward_map=np.sinh,
        inverse_map=np.arcsinh,
        dual_grad=np.arcsinh,
        strong_convexity=1.0,
        potential=_potential,
        dual_potential=_dual_potential,
    )


def _checked_map(out: Array, reference: Array, what: str) -> Array:
    out = np.asarray(out, dtype=np.float64)
    if out.shape != reference.shape:
        raise NonFiniteError(f"{what} returned shape {out.shape}, expected {reference.shape}")
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NonFiniteError(f"{what} produced a non-finite entry at index {bad}")
    return out


def mirror_map(gen: DistanceGenerator, w) -> Array:
    """Map primal weights to the dual point, the gradient of the potential."""
    wv = as_vector(w, name="w")
    if isinstance(gen, QuadraticGenerator):
        check_same_dim(wv, gen.diag, names=("w", "diag"))
        out = gen.diag * wv
    else:
        out = gen.forward_map(wv)
    return _checked_map(out, wv, "mirror map")


def inverse_mirror_map(gen: DistanceGenerator, theta) -> Array:
    """Map a dual point back to primal weights."""
    tv = as_vector(theta, name="theta")
    if isinstance(gen, QuadraticGenerator):
        check_same_dim(tv, gen.diag, names=("theta", "diag"))
        out = tv / gen.diag
    else:
        out = gen.inverse_map(tv)
    return _checked_map(out, tv, "inverse mirror map")


def potential_value(gen: DistanceGenerator, w) -> float:
    wv = as_vector(w, name="w")
    if isinstance(gen, QuadraticGenerator):
        return 0.5 * float(np.dot(wv * gen.diag, wv))
    if gen.potential is None:
        raise FedMirrorError("custom generator carries no potential")
    return float(gen.potential(wv))


def dual_potential_value(gen: DistanceGenerator, theta) -> float:
    tv = as_vector(theta, name="theta")
    if isinstance(gen, QuadraticGenerator):
        return 0.5 * float(np.dot(tv / gen.diag, tv))
    if gen.dual_potential is None:
        raise FedMirrorError("custom generator carries no dual potential")
    return float(gen.dual_potential(tv))


def dual_potential_batch(gen: DistanceGenerator, thetas: Array) -> Array:
    """Dual potential evaluated on each row of a (n, d) array."""
    t = np.asarray(thetas, dtype=np.float64)
    if isinstance(gen, QuadraticGenerator):
        return 0.5 * np.sum(t * t / gen.diag, axis=-1)
    if gen.dual_potential is None:
        raise FedMirrorError("custom generator carries no dual potential")
    out = np.asarray(gen.dual_potential(t), dtype=np.float64)
    if out.shape != t.shape[:-1]:
        out = np.array([float(gen.dual_potential(row)) for row in t])
    return out


def bregman(gen: DistanceGenerator, x, y) -> float:
    """Bregman divergence D(x | y) induced by the generator's potential.

    Nonnegative, and zero iff x == y by strict convexity. For the quadratic
    kind this is half the preconditioner-weighted squared distance.
    """
    xv = as_vector(x, name="x")
    yv = as_vector(y, name="y")
    check_same_dim(xv, yv, names=("x", "y"))
    if isinstance(gen, QuadraticGenerator):
        d = xv - yv
        return 0.5 * float(np.dot(d * gen.diag, d))
    if gen.potential is None:
        raise FedMirrorError("custom generator carries no potential")
    grad_y = _checked_map(gen.forward_map(yv), yv, "mirror map")
    return float(gen.potential(xv)) - float(gen.potential(yv)) - float(np.dot(grad_y, xv - yv))


def bregman_dual(gen: DistanceGenerator, theta_x, theta_y) -> float:
    """Bregman divergence between dual points under the conjugate potential."""
    xv = as_vector(theta_x, name="theta_x")
    yv = as_vector(theta_y, name="theta_y")
    check_same_dim(xv, yv, names=("theta_x", "theta_y"))
    if isinstance(gen, QuadraticGenerator):
        d = xv - yv
        return 0.5 * float(np.dot(d / gen.diag, d))
    if gen.dual_potential is None:
        raise FedMirrorError("custom generator carries no dual potential")
    grad_y = _checked_map(gen.dual_grad(yv), yv, "dual gradient")
    return (
        float(gen.dual_potential(xv))
        - float(gen.dual_potential(yv))
        - float(np.dot(grad_y, xv - yv))
    )


def dual_slope(gen: DistanceGenerator, theta, w, v, eta: float) -> float:
    """Directional derivative of the conjugate potential along ``v``, centered.

    Evaluates d/d(eta) of the dual potential at ``theta + eta * v`` and
    subtracts the inner product of ``v`` with the primal point ``w``, so the
    value at eta = 0 vanishes whenever ``w`` is the primal image of ``theta``.
    Strictly increasing in eta for nonzero ``v``.
    """
    tv = as_vector(theta, name="theta")
    wv = as_vector(w, name="w")
    vv = as_vector(v, name="v")
    check_same_dim(tv, vv, names=("theta", "v"))
    check_same_dim(tv, wv, names=("theta", "w"))
    if isinstance(gen, QuadraticGenerator):
        return eta * weighted_norm_sq(vv, gen.diag, inverse=True)
    grad = _checked_map(gen.dual_grad(tv + eta * vv), tv, "dual gradient")
    return float(np.dot(grad - wv, vv))


def invert_dual_slope(
    gen: DistanceGenerator, theta, w, v, target: float, *, bisect: bool = False
) -> float:
    """Solve dual_slope(gen, theta, w, v, eta) == target for eta >= 0.

    The slope is strictly increasing for nonzero ``v``, so the solution is
    unique. Quadratic generators use the closed form
    target / weighted_norm_sq(v, diag, inverse=True); custom generators (or
    ``bisect=True``) expand an upper bracket geometrically from 1 and bisect.
    The returned eta satisfies |dual_slope(eta) - target| within
    1e-12 + 1e-9 * target.

    Raises DegenerateDirectionError for a zero direction and
    BracketExpansionError when no finite bracket encloses the target.
    """
    vv = as_vector(v, name="v")
    if not np.any(vv):
        raise DegenerateDirectionError("update direction is zero; step size undefined")
    if target < 0.0:
        raise FedMirrorError(f"target slope must be nonnegative, got {target!r}")
    if target == 0.0:
        return 0.0
    if isinstance(gen, QuadraticGenerator) and not bisect:
        return target / weighted_norm_sq(vv, gen.diag, inverse=True)

    def slope(eta):
        return dual_slope(gen, theta, w, vv, eta)

    hi = 1.0
    doublings = 0
    while slope(hi) < target:
        hi *= 2.0
        doublings += 1
        if doublings > _MAX_DOUBLINGS or not math.isfinite(hi):
            raise BracketExpansionError(
                f"target slope {target!r} not bracketed after {doublings} doublings"
            )
    lo = 0.0
    # Bisect down to float resolution; this is tighter than the stated
    # residual tolerance and keeps closed-form comparisons meaningful.
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if slope(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 + 1e-12 * mid:
            break
    return 0.5 * (lo + hi)


def validate_generator(
    gen: DistanceGenerator, dim: int, *, probes: int = 16, seed: int = 0, tol: float = 1e-10
) -> None:
    """Probe the round-trip and strong-convexity contracts on random points.

    Raises FedMirrorError when the forward and inverse maps fail to invert
    each other to relative ``tol``, or when the forward map is not strongly
    monotone with the declared modulus.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, dim, probes]))
    alpha = gen.strong_convexity if isinstance(gen, CustomGenerator) else float(np.min(gen.diag))
    for _ in range(probes):
        w = rng.normal(0.0, 1.0, dim)
        back = inverse_mirror_map(gen, mirror_map(gen, w))
        err = float(np.max(np.abs(back - w))) / max(1.0, float(np.max(np.abs(w))))
        if err > tol:
            raise FedMirrorError(f"round-trip error {err:.3e} exceeds {tol:.1e}")
        y = rng.normal(0.0, 1.0, dim)
        gap = float(np.dot(mirror_map(gen, w) - mirror_map(gen, y), w - y))
        lower = alpha * float(np.dot(w - y, w - y))
        if gap < lower - 1e-9 * max(1.0, abs(lower)):
            raise FedMirrorError(
                f"forward map is not {alpha}-strongly monotone: {gap!r} < {lower!r}"
            )
