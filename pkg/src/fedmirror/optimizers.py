"""Server-side update rules.

Eight families share one step interface: take the current server state and a
round's client updates, return the new weights, the new state, and the global
learning rate actually applied.

  fedavg / fedavgm        fixed global rate, optionally with momentum
  fedexp / fedexpm        rate adapted to the spread of client updates
  fedadagrad / fedadam    diagonally preconditioned pseudo-gradient steps
  fedduadagrad / fedduadam  both adaptations at once: the rate is the
                          preconditioner-weighted analogue of the fedexp
                          ratio, applied through a mirror-descent step
  feddua-generic          the same doubly adaptive rule over an arbitrary
                          distance generator

State recursions, with b = mean client update and k participants:

  adagrad accumulators    sq = sq + b**2,              dir = b
  adam accumulators       sq = b2*sq + (1-b2)*b**2,    dir = b1*dir + (1-b1)*b
  rate numerator          num = sum |delta_i|^2 / (2k)           (plain)
                          num = b1/2 * num_prev + (1-b1)*plain   (momentum)

The preconditioner diagonal is sqrt(sq) + eps, built after the round's
accumulator update.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .clients import ClientUpdate
from .errors import (
    ConfigError,
    DegenerateDirectionError,
    EmptyAggregationError,
    NonFiniteError,
)
from .geometry import (
    CustomGenerator,
    DistanceGenerator,
    QuadraticGenerator,
    cosh_generator,
    identity_generator,
    inverse_mirror_map,
    invert_dual_slope,
    mirror_map,
)
from .vectors import Array, as_positive_diag, as_vector, mean_update, weighted_norm_sq

FAMILIES = (
    "fedavg",
    "fedavgm",
    "fedexp",
    "fedexpm",
    "fedadagrad",
    "fedadam",
    "fedduadagrad",
    "fedduadam",
    "feddua-generic",
)

GENERATOR_SPECS = ("adagrad-quadratic", "cosh")

_PRECONDITIONED = ("fedadagrad", "fedadam", "fedduadagrad", "fedduadam", "feddua-generic")


@dataclass(frozen=True)
class OptimizerConfig:
    family: str = "fedavg"
    eta_g: float = 1.0
    epsilon: float = 1e-9
    epsilon_g: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    force_identity_preconditioner: bool = False
    generator: DistanceGenerator | str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown optimizer family {self.family!r}")
        if not self.eta_g > 0.0:
            raise ConfigError("eta_g must be positive")
        if self.epsilon < 0.0 or self.epsilon_g < 0.0:
            raise ConfigError("epsilon and epsilon_g must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.family == "feddua-generic":
            ok = isinstance(self.generator, (QuadraticGenerator, CustomGenerator)) or (
                self.generator in GENERATOR_SPECS
            )
            if not ok:
                raise ConfigError(
                    f"feddua-generic needs a generator instance or one of {GENERATOR_SPECS}"
                )


@dataclass(frozen=True)
class ServerState:
    """Accumulated server-side optimizer state.

    ``sq_accumulator`` holds the running (or decayed) squared aggregate
    updates, ``direction`` the aggregate update or its momentum average, and
    ``step_numerator`` the adaptive-rate numerator. All are zero before the
    first round.
    """

    weights: Array
    sq_accumulator: Array
    direction: Array
    step_numerator: float
    round_index: int
    config: OptimizerConfig


def init_state(w0, config: OptimizerConfig) -> ServerState:
    w = as_vector(w0, name="w0")
    zeros = np.zeros_like(w)
    return ServerState(
        weights=w,
        sq_accumulator=zeros,
        direction=zeros.copy(),
        step_numerator=0.0,
        round_index=0,
        config=config,
    )


def _sorted_updates(updates) -> list[ClientUpdate]:
    if not updates:
        raise EmptyAggregationError("server step needs at least one client update")
    return sorted(updates, key=lambda u: u.client_id)


def _half_mean_norm_sq(ups: list[ClientUpdate]) -> float:
    return sum(u.norm_sq for u in ups) / (2.0 * len(ups))


def _preconditioner(sq: Array, cfg: OptimizerConfig) -> Array:
    if cfg.force_identity_preconditioner:
        return np.ones_like(sq)
    return as_positive_diag(np.sqrt(sq) + cfg.epsilon, name="preconditioner")


def round_preconditioner(state: ServerState) -> Array:
    """Diagonal in effect for the state's most recent round."""
    return _preconditioner(state.sq_accumulator, state.config)


def round_generator(state: ServerState) -> DistanceGenerator:
    """Distance generator describing the geometry of the state's last step.

    Families without a preconditioner live in plain Euclidean geometry.
    """
    cfg = state.config
    if cfg.family == "feddua-generic":
        return _resolve_generator(cfg, state.sq_accumulator)
    if cfg.family in _PRECONDITIONED:
        return QuadraticGenerator(round_preconditioner(state))
    return identity_generator(state.weights.shape[0])


def _resolve_generator(cfg: OptimizerConfig, sq: Array) -> DistanceGenerator:
    if isinstance(cfg.generator, (QuadraticGenerator, CustomGenerator)):
        return cfg.generator
    if cfg.generator == "adagrad-quadratic":
        return QuadraticGenerator(_preconditioner(sq, cfg))
    if cfg.generator == "cosh":
        return cosh_generator()
    raise ConfigError(f"unresolvable generator spec {cfg.generator!r}")


def _finish(state, w_new, sq, direction, numerator, eta) -> tuple[Array, ServerState, float]:
    if not np.all(np.isfinite(w_new)):
        raise NonFiniteError(f"server step produced non-finite weights at round {state.round_index}")
    new_state = replace(
        state,
        weights=w_new,
        sq_accumulator=sq,
        direction=direction,
        step_numerator=numerator,
        round_index=state.round_index + 1,
    )
    return w_new, new_state, float(eta)


def step_fedavg(state: ServerState, updates, *, momentum: bool = False):
    """Averaged update applied at the configured fixed rate."""
    ups = _sorted_updates(updates)
    cfg = state.config
    delta_bar = mean_update([u.delta for u in ups])
    if momentum:
        direction = cfg.beta1 * state.direction + (1.0 - cfg.beta1) * delta_bar
    else:
        direction = delta_bar
    w_new = state.weights + cfg.eta_g * direction
    return _finish(state, w_new, state.sq_accumulator, direction, state.step_numerator, cfg.eta_g)


def step_fedexp(state: ServerState, updates, *, momentum: bool = False):
    """Rate adapted to client spread: half the mean squared update norm over
    the squared norm of the (possibly momentum-averaged) aggregate."""
    ups = _sorted_updates(updates)
    cfg = state.config
    delta_bar = mean_update([u.delta for u in ups])
    half_mean = _half_mean_norm_sq(ups)
    if momentum:
        direction = cfg.beta1 * state.direction + (1.0 - cfg.beta1) * delta_bar
        numerator = 0.5 * cfg.beta1 * state.step_numerator + (1.0 - cfg.beta1) * half_mean
    else:
        direction = delta_bar
        numerator = half_mean
    denom = float(np.dot(direction, direction)) + cfg.epsilon_g
    if denom == 0.0:
        raise DegenerateDirectionError(
            "aggregated update is zero and epsilon_g is zero; no step size defined"
        )
    eta = numerator / denom
    w_new = state.weights + eta * direction
    return _finish(state, w_new, state.sq_accumulator, direction, numerator, eta)


def step_fedopt(state: ServerState, updates, *, variant: str):
    """Diagonally preconditioned step at the configured fixed rate."""
    ups = _sorted_updates(updates)
    cfg = state.config
    delta_bar = mean_update([u.delta for u in ups])
    if variant == "adagrad":
        sq = state.sq_accumulator + delta_bar * delta_bar
        direction = delta_bar
    elif variant == "adam":
        sq = cfg.beta2 * state.sq_accumulator + (1.0 - cfg.beta2) * delta_bar * delta_bar
        direction = cfg.beta1 * state.direction + (1.0 - cfg.beta1) * delta_bar
    else:
        raise ConfigError(f"unknown fedopt variant {variant!r}")
    if np.any(direction):
        diag = _preconditioner(sq, cfg)
        w_new = state.weights + cfg.eta_g * (direction / diag)
    else:
        w_new = state.weights
    return _finish(state, w_new, sq, direction, state.step_numerator, cfg.eta_g)


def step_feddua(state: ServerState, updates, *, variant: str):
    """Doubly adaptive step: preconditioned direction with the rate set so
    that the dual-space slope matches the rate numerator.

    For the quadratic geometry this is numerator / (|dir|^2 weighted by the
    inverse preconditioner + epsilon_g). The generic variant runs the same
    rule through explicit mirror maps and monotone inversion.
    """
    ups = _sorted_updates(updates)
    cfg = state.config
    delta_bar = mean_update([u.delta for u in ups])
    half_mean = _half_mean_norm_sq(ups)
    if variant == "duadagrad" or variant == "generic":
        sq = state.sq_accumulator + delta_bar * delta_bar
        direction = delta_bar
        numerator = half_mean
    elif variant == "duadam":
        sq = cfg.beta2 * state.sq_accumulator + (1.0 - cfg.beta2) * delta_bar * delta_bar
        direction = cfg.beta1 * state.direction + (1.0 - cfg.beta1) * delta_bar
        numerator = 0.5 * cfg.beta1 * state.step_numerator + (1.0 - cfg.beta1) * half_mean
    else:
        raise ConfigError(f"unknown doubly adaptive variant {variant!r}")

    if variant == "generic":
        gen = _resolve_generator(cfg, sq)
        theta = mirror_map(gen, state.weights)
        if isinstance(gen, QuadraticGenerator) and cfg.epsilon_g != 0.0:
            denom = weighted_norm_sq(direction, gen.diag, inverse=True) + cfg.epsilon_g
            eta = numerator / denom
        else:
            # Degenerate (zero) directions raise here; epsilon_g has no
            # natural place in the monotone inversion, so it only softens
            # the quadratic closed form above.
            eta = invert_dual_slope(gen, theta, state.weights, direction, numerator)
        w_new = inverse_mirror_map(gen, theta + eta * direction)
        return _finish(state, w_new, sq, direction, numerator, eta)

    if not np.any(direction):
        if cfg.epsilon_g == 0.0:
            raise DegenerateDirectionError(
                "aggregated direction is zero and epsilon_g is zero; no step size defined"
            )
        return _finish(state, state.weights, sq, direction, numerator, numerator / cfg.epsilon_g)
    diag = _preconditioner(sq, cfg)
    denom = weighted_norm_sq(direction, diag, inverse=True) + cfg.epsilon_g
    eta = numerator / denom
    w_new = state.weights + eta * (direction / diag)
    return _finish(state, w_new, sq, direction, numerator, eta)


_DISPATCH = {
    "fedavg": lambda s, u: step_fedavg(s, u, momentum=False),
    "fedavgm": lambda s, u: step_fedavg(s, u, momentum=True),
    "fedexp": lambda s, u: step_fedexp(s, u, momentum=False),
    "fedexpm": lambda s, u: step_fedexp(s, u, momentum=True),
    "fedadagrad": lambda s, u: step_fedopt(s, u, variant="adagrad"),
    "fedadam": lambda s, u: step_fedopt(s, u, variant="adam"),
    "fedduadagrad": lambda s, u: step_feddua(s, u, variant="duadagrad"),
    "fedduadam": lambda s, u: step_feddua(s, u, variant="duadam"),
    "feddua-generic": lambda s, u: step_feddua(s, u, variant="generic"),
}


def server_step(state: ServerState, updates) -> tuple[Array, ServerState, float]:
    """Apply one round of the state's configured family.

    Returns (new weights, new state, global learning rate used).
    """
    return _DISPATCH[state.config.family](state, updates)
