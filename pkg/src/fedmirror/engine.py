"""Round orchestration: client sampling, local training, aggregation, the
server step, and metric recording.

A run is a pure function of its configuration and dataset. Client sampling
and every client's minibatch stream are keyed from the run seed, aggregation
order is ascending client id, and the CSV trace renders floats with
round-trip repr, so executing the same configuration twice produces
byte-identical traces. Wall-clock timings are measured and kept in memory
and in the metadata, but the CSV column holds a placeholder unless raw
timings are explicitly requested, keeping the file deterministic.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace

import numpy as np

from .clients import (
    ClientUpdate,
    LocalConfig,
    ScaffoldState,
    exact_projection,
    local_sgd,
    scaffold_step,
)
from .errors import ConfigError, DegenerateDirectionError, DomainError, FedMirrorError
from .geometry import (
    CustomGenerator,
    DistanceGenerator,
    QuadraticGenerator,
    bregman,
    identity_generator,
)
from .optimizers import OptimizerConfig, ServerState, init_state, round_generator, server_step
from .synthetic import FederationInstance, global_loss
from .vectors import Array

CSV_HEADER = "round,eta_g,global_loss,dist_l2,bregman,mean_norm_sq,participants,wall_ms"

EVAL_MODES = ("last-iterate", "avg-last-two")

DIVERGENCE_LOSS = 1e12

_SAMPLING_TAG = 0x53414D50


@dataclass(frozen=True)
class RunConfig:
    rounds: int
    clients_per_round: int
    local: LocalConfig
    optimizer: OptimizerConfig
    seed: int = 0
    eval_mode: str = "last-iterate"
    dataset_ref: str | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")


@dataclass
class RoundRecord:
    round_index: int
    eta_g: float
    global_loss: float
    dist_to_opt_l2: float
    bregman_to_opt: float
    mean_update_norm_sq: float
    participants: tuple[int, ...]
    wall_ms: float


@dataclass
class RoundDetail:
    """Everything the verification oracles need about one round."""

    round_index: int
    participants: tuple[int, ...]
    updates: tuple[ClientUpdate, ...]
    w_before: Array
    w_after: Array
    direction: Array
    numerator: float
    generator: DistanceGenerator
    eta_g: float
    skipped: bool


@dataclass
class RunResult:
    state: ServerState
    records: list[RoundRecord]
    metadata: dict
    details: list[RoundDetail] | None = None


def sample_participants(seed: int, round_index: int, num_clients: int, count: int) -> tuple[int, ...]:
    """Uniform sample without replacement, returned in ascending id order."""
    if count > num_clients:
        raise ConfigError(f"cannot sample {count} of {num_clients} clients")
    if count == num_clients:
        return tuple(range(num_clients))
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=[seed, _SAMPLING_TAG, round_index])
    )
    chosen = rng.choice(num_clients, size=count, replace=False)
    return tuple(int(c) for c in np.sort(chosen))


def evaluate(w_current: Array, w_previous: Array | None, mode: str) -> Array:
    """Evaluation iterate: the current point, or its midpoint with the
    previous one. With no previous iterate both modes return the current."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"eval mode must be one of {EVAL_MODES}")
    if mode == "last-iterate" or w_previous is None:
        return w_current
    return 0.5 * (w_current + w_previous)


def _train_one(cfg: RunConfig, instance, cid: int, w, round_index, scaffold: ScaffoldState | None):
    data = instance.clients[cid]
    strategy = cfg.local.strategy
    if strategy == "exact-projection":
        return exact_projection(w, data), None
    if strategy == "scaffold":
        upd, new_control = scaffold_step(
            w,
            data,
            cfg.local,
            scaffold.control_for(cid, instance.dim),
            scaffold.server_control,
            seed=cfg.seed,
            round_index=round_index,
        )
        return upd, new_control
    return local_sgd(w, data, cfg.local, seed=cfg.seed, round_index=round_index), None


def run(cfg: RunConfig, instance: FederationInstance, *, collect_details: bool = False) -> RunResult:
    """Execute the configured number of rounds on the given federation.

    A degenerate server step (zero direction with epsilon_g = 0) is recorded
    as a skipped round with the model unchanged. The run stops early when
    the loss exceeds 1e12 or turns non-finite; the partial trace is kept and
    metadata carries the divergence round.
    """
    num_clients = instance.num_clients
    if cfg.clients_per_round > num_clients:
        raise ConfigError(
            f"clients_per_round {cfg.clients_per_round} exceeds the instance's {num_clients}"
        )
    state = init_state(np.zeros(instance.dim), cfg.optimizer)
    scaffold = ScaffoldState.zeros(instance.dim) if cfg.local.strategy == "scaffold" else None
    records: list[RoundRecord] = []
    details: list[RoundDetail] = [] if collect_details else None
    metadata = {"skipped_rounds": [], "diverged_at": None, "total_wall_ms": 0.0}
    run_start = time.perf_counter()

    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        participants = sample_participants(cfg.seed, t, num_clients, cfg.clients_per_round)
        updates = []
        new_controls = {}
        for cid in participants:
            upd, new_control = _train_one(cfg, instance, cid, state.weights, t, scaffold)
            updates.append(upd)
            if new_control is not None:
                new_controls[cid] = new_control

        w_before = state.weights
        try:
            w_new, state_new, eta = server_step(state, updates)
            skipped = False
        except DegenerateDirectionError:
            w_new, state_new, eta = state.weights, state, 0.0
            skipped = True
            metadata["skipped_rounds"].append(t)

        if scaffold is not None:
            for cid in sorted(new_controls):
                old = scaffold.control_for(cid, instance.dim)
                scaffold.server_control = (
                    scaffold.server_control + (new_controls[cid] - old) / num_clients
                )
                scaffold.client_controls[cid] = new_controls[cid]

        w_eval = evaluate(w_new, w_before, cfg.eval_mode)
        loss = global_loss(instance, w_eval)
        diff = w_eval - instance.w_star
        try:
            gen = round_generator(state_new)
        except DomainError:
            # A zero accumulator coordinate with epsilon = 0 makes the
            # round's geometry degenerate; fall back to plain Euclidean so
            # the recorded metrics stay finite.
            gen = identity_generator(instance.dim)
        mean_norm_sq = sum(u.norm_sq for u in updates) / len(updates)
        wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(
            RoundRecord(
                round_index=t,
                eta_g=eta,
                global_loss=loss,
                dist_to_opt_l2=float(np.linalg.norm(diff)),
                bregman_to_opt=bregman(gen, instance.w_star, w_eval),
                mean_update_norm_sq=mean_norm_sq,
                participants=participants,
                wall_ms=wall_ms,
            )
        )
        if details is not None:
            details.append(
                RoundDetail(
                    round_index=t,
                    participants=participants,
                    updates=tuple(updates),
                    w_before=w_before,
                    w_after=w_new,
                    direction=state_new.direction,
                    numerator=state_new.step_numerator,
                    generator=gen,
                    eta_g=eta,
                    skipped=skipped,
                )
            )
        state = state_new
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            metadata["diverged_at"] = t
            break

    metadata["total_wall_ms"] = (time.perf_counter() - run_start) * 1e3
    return RunResult(state=state, records=records, metadata=metadata, details=details)


def records_to_csv(records, *, wall_clock: bool = False) -> str:
    """Render the trace. The wall_ms column is a fixed placeholder unless
    raw timings are requested, so default output is reproducible."""
    lines = [CSV_HEADER]
    for r in records:
        wall = repr(r.wall_ms) if wall_clock else "0.0"
        participants = ";".join(str(p) for p in r.participants)
        lines.append(
            f"{r.round_index},{r.eta_g!r},{r.global_loss!r},{r.dist_to_opt_l2!r},"
            f"{r.bregman_to_opt!r},{r.mean_update_norm_sq!r},{participants},{wall}"
        )
    return "\n".join(lines) + "\n"


def final_window_loss(records, window: int = 5) -> float:
    """Mean recorded loss over the trailing evaluation window."""
    if not records:
        raise FedMirrorError("no records to summarize")
    tail = records[-window:]
    return float(np.mean([r.global_loss for r in tail]))


def _config_to_jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _config_to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (QuadraticGenerator, CustomGenerator)):
        return f"<generator:{type(obj).__name__}>"
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _config_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_config_to_jsonable(v) for v in obj]
    return obj


def run_config_to_dict(cfg: RunConfig) -> dict:
    return _config_to_jsonable(cfg)


def apply_override(cfg: RunConfig, path: str, value) -> RunConfig:
    """Return a copy of the configuration with one dotted field replaced.

    Paths address RunConfig fields, optionally through the nested ``local``
    and ``optimizer`` sections, e.g. "local.eta_l" or "rounds". A leading
    "run." prefix is accepted and stripped.
    """
    parts = path.split(".")
    if parts and parts[0] == "run":
        parts = parts[1:]
    if not parts or not all(parts):
        raise ConfigError(f"bad override path {path!r}")
    target = cfg
    for prefix in parts[:-1]:
        if not hasattr(target, prefix) or not is_dataclass(getattr(target, prefix)):
            raise ConfigError(f"override path {path!r} does not name a config section")
        target = getattr(target, prefix)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"override path {path!r} names no config field")
    if len(parts) == 1:
        return replace(cfg, **{leaf: value})
    section = parts[0]
    new_section = replace(getattr(cfg, section), **{leaf: value})
    return replace(cfg, **{section: new_section})


@dataclass
class CellResult:
    params: dict
    seeds: list[int]
    per_seed: list[float]
    mean: float | None
    stdev: float | None
    failed: bool = False
    error: str | None = None


@dataclass
class SweepReport:
    grid_keys: list[str]
    seeds: list[int]
    cells: list[CellResult]
    best_index: int | None
    reused: int = 0

    @property
    def best(self) -> CellResult | None:
        return None if self.best_index is None else self.cells[self.best_index]


def _cell_key(base_digest: str, params: dict, seeds) -> str:
    payload = json.dumps(
        {"base": base_digest, "params": params, "seeds": list(seeds)},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _run_cell(base: RunConfig, instance, params: dict, seeds, window: int) -> CellResult:
    try:
        cfg = base
        for path, value in params.items():
            cfg = apply_override(cfg, path, value)
        losses = []
        for seed in seeds:
            result = run(replace(cfg, seed=int(seed)), instance)
            losses.append(final_window_loss(result.records, window))
        mean = float(np.mean(losses))
        stdev = float(np.std(losses, ddof=1)) if len(losses) > 1 else 0.0
        return CellResult(
            params=params, seeds=list(seeds), per_seed=losses, mean=mean, stdev=stdev
        )
    except (FedMirrorError, FloatingPointError) as exc:
        return CellResult(
            params=params,
            seeds=list(seeds),
            per_seed=[],
            mean=None,
            stdev=None,
            failed=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep(
    grid: dict[str, list],
    base: RunConfig,
    seeds,
    instance: FederationInstance,
    *,
    threads: int = 1,
    window: int = 5,
    cache_dir=None,
) -> SweepReport:
    """Run the Cartesian product of the grid, each cell over every seed.

    Cell summaries are the mean and sample standard deviation of the
    trailing-window loss across seeds; the best cell minimizes the mean.
    Failed cells are marked and skipped for ranking. With a cache directory,
    completed cells are written as JSON keyed by a config hash and reused on
    re-runs.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    keys = sorted(grid)
    for key, values in grid.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid entry {key!r} must be a nonempty list")
    combos = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    base_digest = hashlib.sha256(
        json.dumps(run_config_to_dict(base), sort_keys=True).encode()
    ).hexdigest()

    reused = 0
    pending = []
    slots: list[CellResult | None] = [None] * len(combos)
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(combos):
        if cache_dir is not None:
            path = cache_dir / f"{_cell_key(base_digest, params, seeds)}.json"
            if path.exists():
                slots[i] = CellResult(**json.loads(path.read_text()))
                reused += 1
                continue
        pending.append(i)

    def work(i):
        return i, _run_cell(base, instance, combos[i], seeds, window)

    if threads > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, cell in pool.map(work, pending):
                slots[i] = cell
    else:
        for i in pending:
            slots[i] = work(i)[1]

    if cache_dir is not None:
        for i in pending:
            path = cache_dir / f"{_cell_key(base_digest, combos[i], seeds)}.json"
            path.write_text(json.dumps(slots[i].__dict__, sort_keys=True))

    cells = [c for c in slots if c is not None]
    ranked = [(c.mean, i) for i, c in enumerate(cells) if not c.failed and c.mean is not None]
    best_index = min(ranked)[1] if ranked else None
    return SweepReport(
        grid_keys=keys, seeds=list(seeds), cells=cells, best_index=best_index, reused=reused
    )
