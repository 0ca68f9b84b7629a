"""Client-side training procedures that produce one round's local update.

Every client works on a least-squares objective: for a sample (x, y) the loss
is 0.5 * (<w, x> - y)**2, so the per-sample gradient is (<w, x> - y) * x and
a client's full objective is the mean of its per-sample losses.

Randomness is keyed by (seed, client_id, round_index, step) so one client's
stream never depends on which other clients participate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    DomainError,
    FedMirrorError,
    SingularSystemError,
)
from .vectors import Array, as_vector

STRATEGIES = ("sgd", "exact-projection", "fedprox", "scaffold")

GRAM_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class ClientDataset:
    """One client's samples: ``inputs`` is (n, d) and ``targets`` is (n,)."""

    inputs: Array = field(repr=False)
    targets: Array = field(repr=False)
    client_id: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DimensionMismatchError(
                f"client {self.client_id}: inputs {x.shape} and targets {y.shape} disagree"
            )
        if x.shape[0] < 1:
            raise DomainError(f"client {self.client_id}: needs at least one sample")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError(f"client {self.client_id}: non-finite sample data")
        if int(self.client_id) < 0:
            raise DomainError("client_id must be nonnegative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "client_id", int(self.client_id))

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class LocalConfig:
    """How clients train: strategy, step size, step count, batching.

    ``batch_size`` is a positive int or the string "full". ``mu`` is the
    proximal coefficient and only takes effect under the fedprox strategy.
    """

    strategy: str = "sgd"
    eta_l: float = 0.01
    steps: int = 1
    batch_size: int | str = "full"
    mu: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DomainError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.eta_l > 0.0:
            raise DomainError("eta_l must be positive")
        if int(self.steps) < 1:
            raise DomainError("steps must be at least 1")
        object.__setattr__(self, "steps", int(self.steps))
        if isinstance(self.batch_size, str):
            if self.batch_size != "full":
                raise DomainError(f"batch_size must be a positive int or 'full', got {self.batch_size!r}")
        elif int(self.batch_size) < 1:
            raise DomainError("batch_size must be at least 1")
        else:
            object.__setattr__(self, "batch_size", int(self.batch_size))
        if self.mu < 0.0:
            raise DomainError("mu must be nonnegative")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's update direction plus its cached squared norm."""

    delta: Array = field(repr=False)
    norm_sq: float
    client_id: int

    @classmethod
    def from_delta(cls, delta: Array, client_id: int) -> "ClientUpdate":
        d = as_vector(delta, name="delta")
        return cls(delta=d, norm_sq=float(np.dot(d, d)), client_id=int(client_id))


@dataclass
class ScaffoldState:
    """Control variates: one per client that has participated, plus the
    server's running mean over all clients."""

    client_controls: dict[int, Array]
    server_control: Array

    @classmethod
    def zeros(cls, dim: int) -> "ScaffoldState":
        return cls(client_controls={}, server_control=np.zeros(dim))

    def control_for(self, client_id: int, dim: int) -> Array:
        return self.client_controls.get(client_id, np.zeros(dim))


def _step_rng(seed: int, client_id: int, round_index: int, step: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[seed, client_id, round_index, step])
    )


def _run_local_steps(w_start, data, cfg, seed, round_index, correction=None):
    mu = cfg.mu if cfg.strategy == "fedprox" else 0.0
    if isinstance(cfg.batch_size, int) and cfg.batch_size > data.num_samples:
        raise DomainError(
            f"batch_size {cfg.batch_size} exceeds client {data.client_id}'s "
            f"{data.num_samples} samples"
        )
    w = w_start.copy()
    eta_l = cfg.eta_l
    full = cfg.batch_size == "full"
    x_full, y_full = data.inputs, data.targets
    for step in range(cfg.steps):
        if full:
            x, y = x_full, y_full
        else:
            # Fresh uniform without-replacement draw per step, keyed so the
            # stream survives partial participation unchanged.
            rng = _step_rng(seed, data.client_id, round_index, step)
            idx = rng.choice(data.num_samples, size=cfg.batch_size, replace=False)
            x, y = x_full[idx], y_full[idx]
        resid = x @ w
        resid -= y
        grad = resid @ x
        grad /= y.shape[0]
        if mu != 0.0:
            grad += mu * (w - w_start)
        if correction is not None:
            grad += correction
        w -= eta_l * grad
    return w


def local_sgd(w_start, data: ClientDataset, cfg: LocalConfig, *, seed: int, round_index: int) -> ClientUpdate:
    """Run the configured number of local SGD steps from the broadcast model.

    Each step samples its minibatch uniformly without replacement (fresh per
    step), or uses every sample under "full". The fedprox strategy adds
    mu * (w - w_start) to each step's gradient. Returns the difference
    between the final local model and the broadcast model.
    """
    if cfg.strategy not in ("sgd", "fedprox"):
        raise FedMirrorError(f"local_sgd does not handle strategy {cfg.strategy!r}")
    w0 = as_vector(w_start, name="w_start")
    if w0.shape[0] != data.dim:
        raise DimensionMismatchError(
            f"model dimension {w0.shape[0]} != client data dimension {data.dim}"
        )
    w = _run_local_steps(w0, data, cfg, seed, round_index)
    return ClientUpdate.from_delta(w - w0, data.client_id)


def exact_projection(w_start, data: ClientDataset) -> ClientUpdate:
    """Euclidean projection of the broadcast model onto the client's
    interpolation set {w : inputs @ w == targets}.

    Solved through the n x n Gram system (inputs @ inputs.T) lam = residual
    with one iterative-refinement pass; the update is inputs.T @ lam. Raises
    SingularSystemError when the Gram condition estimate exceeds 1e12.
    """
    w0 = as_vector(w_start, name="w_start")
    x, y = data.inputs, data.targets
    if w0.shape[0] != data.dim:
        raise DimensionMismatchError(
            f"model dimension {w0.shape[0]} != client data dimension {data.dim}"
        )
    gram = x @ x.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise SingularSystemError(
            f"client {data.client_id}: Gram condition estimate {cond:.3e} exceeds "
            f"{GRAM_CONDITION_LIMIT:.0e}"
        )
    resid = y - x @ w0
    lam = np.linalg.solve(gram, resid)
    lam += np.linalg.solve(gram, resid - gram @ lam)
    return ClientUpdate.from_delta(lam @ x, data.client_id)


def scaffold_step(
    w_start,
    data: ClientDataset,
    cfg: LocalConfig,
    client_control: Array,
    server_control: Array,
    *,
    seed: int,
    round_index: int,
) -> tuple[ClientUpdate, Array]:
    """Local SGD with control-variate drift correction.

    Each step's gradient is shifted by (server_control - client_control).
    The client control is refreshed without an extra gradient pass:
    new_control = client_control - server_control - delta / (steps * eta_l).
    Returns the update and the refreshed client control; merging the
    refreshed control into the server's running mean is the caller's job.
    """
    if cfg.strategy != "scaffold":
        raise FedMirrorError(f"scaffold_step requires the scaffold strategy, got {cfg.strategy!r}")
    w0 = as_vector(w_start, name="w_start")
    ci = as_vector(client_control, name="client_control")
    c = as_vector(server_control, name="server_control")
    if ci.shape != w0.shape or c.shape != w0.shape:
        raise DimensionMismatchError("control variates must match the model dimension")
    w = _run_local_steps(w0, data, cfg, seed, round_index, correction=c - ci)
    delta = w - w0
    new_control = ci - c - delta / (cfg.steps * cfg.eta_l)
    return ClientUpdate.from_delta(delta, data.client_id), new_control
