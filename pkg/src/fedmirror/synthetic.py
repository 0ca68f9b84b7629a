"""Synthetic federations for overparameterized linear regression.

The main generator draws anisotropic inputs whose per-coordinate variance
decays polynomially, gives every client its own mean weight vector, and
labels samples exactly (no noise), so the stacked system is consistent and a
shared interpolating optimum exists. A second, plainer generator builds
small consistent instances for verification suites.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .clients import ClientDataset
from .errors import DimensionMismatchError, DomainError, SingularSystemError
from .vectors import Array, as_vector

GRAM_CONDITION_LIMIT = 1e12
_MAX_REGENERATIONS = 5

_MAGIC = "FEDMIRROR-INSTANCE"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the anisotropic regression federation.

    Inputs are N(0, diag(k**-decay)), per-sample weight vectors are
    N(client_mean, identity), and client means are N(0, mean_variance * I).
    The total sample count must stay below the dimension so that the stacked
    system is overparameterized.
    """

    clients: int = 20
    samples_per_client: int = 30
    dim: int = 1000
    decay: float = 1.1
    mean_variance: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1 or self.samples_per_client < 1 or self.dim < 1:
            raise DomainError("clients, samples_per_client and dim must be positive")
        if self.clients * self.samples_per_client >= self.dim:
            raise DomainError(
                f"need clients * samples_per_client < dim for overparameterization, "
                f"got {self.clients * self.samples_per_client} >= {self.dim}"
            )
        if not self.decay > 1.0:
            raise DomainError("decay must exceed 1")
        if self.mean_variance < 0.0:
            raise DomainError("mean_variance must be nonnegative")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")


@dataclass(frozen=True)
class FederationInstance:
    """A fixed federation plus its minimum-norm interpolating optimum."""

    clients: tuple[ClientDataset, ...]
    w_star: Array = field(repr=False)
    metadata: dict
    stacked_inputs: Array = field(repr=False, default=None)
    stacked_targets: Array = field(repr=False, default=None)
    offsets: Array = field(repr=False, default=None)

    def __post_init__(self):
        if not self.clients:
            raise DomainError("instance needs at least one client")
        dims = {c.dim for c in self.clients}
        if len(dims) != 1:
            raise DimensionMismatchError(f"clients disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "w_star", as_vector(self.w_star, name="w_star"))
        if self.w_star.shape[0] not in dims:
            raise DimensionMismatchError("w_star dimension does not match the clients")
        x = np.concatenate([c.inputs for c in self.clients], axis=0)
        y = np.concatenate([c.targets for c in self.clients])
        counts = np.array([c.num_samples for c in self.clients])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        object.__setattr__(self, "stacked_inputs", x)
        object.__setattr__(self, "stacked_targets", y)
        object.__setattr__(self, "offsets", offsets)
        resid = float(np.linalg.norm(x @ self.w_star - y))
        scale = max(1e-30, float(np.linalg.norm(y)))
        if resid > 1e-6 * scale:
            raise DomainError(
                f"w_star does not interpolate the stacked system: residual {resid:.3e} "
                f"exceeds 1e-6 * |y| = {1e-6 * scale:.3e}"
            )

    @property
    def dim(self) -> int:
        return self.clients[0].dim

    @property
    def num_clients(self) -> int:
        return len(self.clients)


def min_norm_solution(x: Array, y: Array) -> tuple[Array, float]:
    """Minimum-norm solution of the consistent underdetermined system x w = y.

    Solves the Gram system (x x^T) lam = y with one refinement pass and
    returns x^T lam together with the Gram condition estimate. Raises
    SingularSystemError when the condition estimate exceeds 1e12.
    """
    gram = x @ x.T
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise SingularSystemError(f"Gram condition estimate {cond:.3e} exceeds 1e12")
    lam = np.linalg.solve(gram, y)
    lam += np.linalg.solve(gram, y - gram @ lam)
    return lam @ x, cond


def _draw_instance(spec: SyntheticSpec, seed: int) -> tuple[list[ClientDataset], Array]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, spec.dim, spec.clients]))
    scales = np.arange(1, spec.dim + 1, dtype=np.float64) ** (-spec.decay / 2.0)
    mean_std = float(np.sqrt(spec.mean_variance))
    clients = []
    for cid in range(spec.clients):
        client_mean = rng.normal(0.0, mean_std, spec.dim)
        x = rng.normal(0.0, 1.0, (spec.samples_per_client, spec.dim)) * scales
        sample_weights = client_mean + rng.normal(0.0, 1.0, (spec.samples_per_client, spec.dim))
        y = np.einsum("ij,ij->i", sample_weights, x)
        clients.append(ClientDataset(inputs=x, targets=y, client_id=cid))
    stacked_x = np.concatenate([c.inputs for c in clients], axis=0)
    stacked_y = np.concatenate([c.targets for c in clients])
    w_star, _ = min_norm_solution(stacked_x, stacked_y)
    return clients, w_star


def generate(spec: SyntheticSpec) -> FederationInstance:
    """Draw the federation; retry with a perturbed seed on a singular draw."""
    seed = spec.seed
    for attempt in range(_MAX_REGENERATIONS + 1):
        try:
            clients, w_star = _draw_instance(spec, seed)
        except SingularSystemError:
            seed += 1
            continue
        metadata = {
            "kind": "synthetic",
            "seed": seed,
            "requested_seed": spec.seed,
            "regenerations": attempt,
            "spec": {
                "clients": spec.clients,
                "samples_per_client": spec.samples_per_client,
                "dim": spec.dim,
                "decay": spec.decay,
                "mean_variance": spec.mean_variance,
            },
        }
        return FederationInstance(clients=tuple(clients), w_star=w_star, metadata=metadata)
    raise SingularSystemError(
        f"gave up after {_MAX_REGENERATIONS} regenerations from seed {spec.seed}"
    )


def random_interpolation_instance(
    dim: int, clients: int, samples_per_client: int, seed: int
) -> FederationInstance:
    """Small consistent federation: Gaussian inputs, labels from a shared
    weight vector, so every client's system and the stacked system admit a
    common solution. Used by the verification suites."""
    if clients * samples_per_client > dim:
        raise DomainError("total samples may not exceed the dimension")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, dim, clients, samples_per_client]))
    w_base = rng.normal(0.0, 1.0, dim)
    out = []
    for cid in range(clients):
        x = rng.normal(0.0, 1.0, (samples_per_client, dim))
        out.append(ClientDataset(inputs=x, targets=x @ w_base, client_id=cid))
    stacked_x = np.concatenate([c.inputs for c in out], axis=0)
    stacked_y = np.concatenate([c.targets for c in out])
    w_star, _ = min_norm_solution(stacked_x, stacked_y)
    metadata = {"kind": "interpolation", "seed": seed, "requested_seed": seed, "regenerations": 0}
    return FederationInstance(clients=tuple(out), w_star=w_star, metadata=metadata)


def global_loss(inst: FederationInstance, w) -> float:
    """Mean over clients of the per-client mean squared residual halved."""
    wv = as_vector(w, name="w")
    resid = inst.stacked_inputs @ wv - inst.stacked_targets
    per_client = np.add.reduceat(resid * resid, inst.offsets)
    counts = np.array([c.num_samples for c in inst.clients], dtype=np.float64)
    return float(np.sum(per_client / (2.0 * counts)) / inst.num_clients)


def client_gradient(data: ClientDataset, w) -> Array:
    """Gradient of one client's objective at w."""
    wv = as_vector(w, name="w")
    resid = data.inputs @ wv - data.targets
    return (resid @ data.inputs) / data.num_samples


def global_gradient(inst: FederationInstance, w) -> Array:
    """Gradient of the federation objective: the mean of client gradients."""
    wv = as_vector(w, name="w")
    resid = inst.stacked_inputs @ wv - inst.stacked_targets
    counts = np.concatenate([np.full(c.num_samples, c.num_samples, dtype=np.float64) for c in inst.clients])
    weights = resid / (counts * inst.num_clients)
    return weights @ inst.stacked_inputs


def heterogeneity_at_opt(inst: FederationInstance) -> float:
    """Mean squared client-gradient norm at the interpolating optimum."""
    total = 0.0
    for c in inst.clients:
        g = client_gradient(c, inst.w_star)
        total += float(np.dot(g, g))
    return total / inst.num_clients


def serialize_instance(inst: FederationInstance) -> bytes:
    """Flat binary encoding: one ASCII header line, then little-endian
    float64 payload holding each client's row-major inputs and targets
    followed by the optimum."""
    counts = ";".join(str(c.num_samples) for c in inst.clients)
    header = (
        f"{_MAGIC} {_FORMAT_VERSION} clients={inst.num_clients} dim={inst.dim} "
        f"samples={counts} seed={inst.metadata.get('seed', 0)} "
        f"kind={inst.metadata.get('kind', 'unknown')}\n"
    )
    buf = io.BytesIO()
    buf.write(header.encode("ascii"))
    for c in inst.clients:
        buf.write(np.ascontiguousarray(c.inputs, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(c.targets, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(inst.w_star, dtype="<f8").tobytes())
    return buf.getvalue()


def instance_hash(inst: FederationInstance) -> str:
    return hashlib.sha256(serialize_instance(inst)).hexdigest()


def save_instance(inst: FederationInstance, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_instance(inst))


def load_instance(path) -> FederationInstance:
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.index(b"\n")
    header = raw[:newline].decode("ascii").split()
    if header[0] != _MAGIC or int(header[1]) != _FORMAT_VERSION:
        raise DomainError(f"not a recognized instance file: header {header[:2]}")
    fields = dict(item.split("=", 1) for item in header[2:])
    num_clients = int(fields["clients"])
    dim = int(fields["dim"])
    counts = [int(s) for s in fields["samples"].split(";")]
    if len(counts) != num_clients:
        raise DomainError("instance header is inconsistent")
    payload = np.frombuffer(raw, dtype="<f8", offset=newline + 1)
    clients = []
    pos = 0
    for cid, n in enumerate(counts):
        x = payload[pos : pos + n * dim].reshape(n, dim)
        pos += n * dim
        y = payload[pos : pos + n]
        pos += n
        clients.append(ClientDataset(inputs=x.copy(), targets=y.copy(), client_id=cid))
    w_star = payload[pos : pos + dim].copy()
    metadata = {
        "kind": fields.get("kind", "unknown"),
        "seed": int(fields.get("seed", 0)),
        "requested_seed": int(fields.get("seed", 0)),
        "regenerations": 0,
    }
    return FederationInstance(clients=tuple(clients), w_star=w_star, metadata=metadata)
