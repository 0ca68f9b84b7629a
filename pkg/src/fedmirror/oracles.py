"""Independent numerical verifiers for the optimizer's defining properties.

Three checks matter:

  1. Lower bound: whenever averaged local training moves clients toward the
     optimum, the one-round-optimal step size (in the round's geometry) is
     at least the step size the doubly adaptive rule applied.
  2. The same bound for the momentum variant, whose hypothesis additionally
     constrains the step sizes of all earlier rounds.
  3. Minimax: the applied step minimizes a convex dual objective, located
     here by brute-force grid search that shares no code path with the
     closed forms it audits.

Clients that perform exact projections make the projection conditions hold
by construction, so runs driven by them exercise the bounds at every round.
Rounds where a hypothesis fails are excluded and reported, never counted as
violations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clients import ClientUpdate, LocalConfig
from .engine import RoundDetail, RunConfig, run
from .errors import DegenerateDirectionError, FedMirrorError, InconclusiveError
from .geometry import (
    DistanceGenerator,
    QuadraticGenerator,
    cosh_generator,
    dual_potential_batch,
    dual_potential_value,
    dual_slope,
    invert_dual_slope,
    mirror_map,
)
from .optimizers import OptimizerConfig
from .synthetic import FederationInstance, random_interpolation_instance
from .vectors import Array, as_vector, mean_update, weighted_norm_sq

DEFAULT_TOL = 1e-9
RESIDUAL_TOL = 1e-8


@dataclass
class ApcReport:
    """Both projection conditions evaluated literally at one round.

    The plain condition says the post-training local models are, on average,
    no farther from the optimum than the broadcast model; the strong form
    lower-bounds the aggregate's alignment with the direction to the
    optimum by the full mean squared update norm.
    """

    round_index: int
    apc_holds: bool
    strong_apc_holds: bool
    apc_lhs: float
    apc_rhs: float
    strong_lhs: float
    strong_rhs: float


def check_apc(w_current, updates, w_star, *, round_index: int = 0, tol: float = DEFAULT_TOL) -> ApcReport:
    """Evaluate both projection conditions and their algebraic reduction.

    The plain condition is also evaluated in its reduced inner-product form;
    the two verdicts must agree, otherwise the evaluation itself is broken.
    """
    w = as_vector(w_current, name="w_current")
    ws = as_vector(w_star, name="w_star")
    deltas = [u.delta for u in sorted(updates, key=lambda u: u.client_id)]
    count = len(deltas)
    delta_bar = mean_update(deltas)
    mean_sq = sum(float(np.dot(d, d)) for d in deltas) / count

    apc_lhs = sum(float(np.dot(w + d - ws, w + d - ws)) for d in deltas) / count
    apc_rhs = float(np.dot(w - ws, w - ws))
    apc_holds = apc_lhs <= apc_rhs + tol * max(1.0, abs(apc_rhs))

    strong_lhs = float(np.dot(delta_bar, ws - w))
    strong_rhs = mean_sq
    strong_holds = strong_lhs >= strong_rhs - tol * max(1.0, abs(strong_rhs))

    reduced_rhs = 0.5 * mean_sq
    reduced_holds = strong_lhs >= reduced_rhs - tol * max(1.0, abs(reduced_rhs))
    if reduced_holds != apc_holds:
        raise FedMirrorError(
            f"projection-condition evaluations disagree at round {round_index}: "
            f"literal={apc_holds} reduced={reduced_holds}"
        )

    return ApcReport(
        round_index=round_index,
        apc_holds=apc_holds,
        strong_apc_holds=strong_holds,
        apc_lhs=apc_lhs,
        apc_rhs=apc_rhs,
        strong_lhs=strong_lhs,
        strong_rhs=strong_rhs,
    )


def optimal_step_oracle(
    gen: DistanceGenerator,
    theta,
    w,
    v,
    w_star,
    *,
    eta_max: float,
    num_points: int = 10_001,
) -> tuple[float | None, float]:
    """One-round-optimal step size, twice.

    Returns the closed form (quadratic generators only, else None) and the
    brute-force argmin of the dual-space distance to the optimum over a
    uniform grid on [0, eta_max]. Raises InconclusiveError when the grid
    argmin lands on the upper boundary.
    """
    vv = as_vector(v, name="v")
    if not np.any(vv):
        raise DegenerateDirectionError("optimal step undefined for a zero direction")
    wv = as_vector(w, name="w")
    ws = as_vector(w_star, name="w_star")
    tv = as_vector(theta, name="theta")

    closed = None
    if isinstance(gen, QuadraticGenerator):
        closed = float(np.dot(ws - wv, vv)) / weighted_norm_sq(vv, gen.diag, inverse=True)

    theta_star = mirror_map(gen, ws)
    etas = np.linspace(0.0, eta_max, num_points)
    thetas = tv[None, :] + etas[:, None] * vv[None, :]
    dists = (
        dual_potential_batch(gen, thetas)
        - dual_potential_value(gen, theta_star)
        - (thetas - theta_star) @ ws
    )
    k = int(np.argmin(dists))
    if k == num_points - 1:
        raise InconclusiveError("grid argmin at the boundary; enlarge eta_max")
    return closed, float(etas[k])


@dataclass
class MinimaxCase:
    """One brute-force audit of the applied step size."""

    eta_checked: float
    grid_argmin: float
    cell: float
    convex_ok: bool
    argmin_ok: bool
    residual: float
    residual_ok: bool

    @property
    def ok(self) -> bool:
        return self.convex_ok and self.argmin_ok and self.residual_ok


def verify_minimax(
    gen: DistanceGenerator,
    w_current,
    updates,
    *,
    num_points: int = 10_000,
    inject: float = 1.0,
    tol: float = DEFAULT_TOL,
    residual_tol: float = RESIDUAL_TOL,
) -> MinimaxCase:
    """Audit the step size against the dual objective it should minimize.

    The dual objective along the aggregate direction is evaluated on a grid
    over [0, 4 * eta + 1]; the curve must be discretely convex, its argmin
    must land within one grid cell of the step size under audit, and the
    centered dual slope at that step must match the rate numerator.
    ``inject`` deliberately scales the audited step for negative controls.
    """
    w = as_vector(w_current, name="w_current")
    deltas = [u.delta for u in sorted(updates, key=lambda u: u.client_id)]
    delta_bar = mean_update(deltas)
    if not np.any(delta_bar):
        raise DegenerateDirectionError("minimax audit needs a nonzero aggregate")
    target = sum(float(np.dot(d, d)) for d in deltas) / (2.0 * len(deltas))
    theta = mirror_map(gen, w)

    eta = invert_dual_slope(gen, theta, w, delta_bar, target)
    eta_checked = eta * inject
    eta_max = 4.0 * eta_checked + 1.0
    lambdas = np.linspace(0.0, eta_max, num_points)
    thetas = theta[None, :] + lambdas[:, None] * delta_bar[None, :]
    objective = (
        dual_potential_batch(gen, thetas)
        - dual_potential_value(gen, theta)
        - lambdas * float(np.dot(w, delta_bar))
        - lambdas * target
    )
    scale = max(1.0, float(np.max(np.abs(objective))))
    second = objective[2:] - 2.0 * objective[1:-1] + objective[:-2]
    convex_ok = bool(np.all(second >= -tol * scale))
    k = int(np.argmin(objective))
    if k == num_points - 1:
        raise InconclusiveError("dual-objective argmin at the boundary; enlarge the grid")
    cell = eta_max / (num_points - 1)
    argmin_ok = abs(float(lambdas[k]) - eta_checked) <= cell + tol
    residual = dual_slope(gen, theta, w, delta_bar, eta_checked) - target
    residual_ok = abs(residual) <= residual_tol * max(1.0, target)
    return MinimaxCase(
        eta_checked=eta_checked,
        grid_argmin=float(lambdas[k]),
        cell=cell,
        convex_ok=convex_ok,
        argmin_ok=argmin_ok,
        residual=residual,
        residual_ok=residual_ok,
    )


@dataclass
class LowerBoundReport:
    """Round-by-round audit of a doubly adaptive run."""

    checked: int = 0
    violations: list[dict] = field(default_factory=list)
    residual_violations: list[dict] = field(default_factory=list)
    excluded: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.residual_violations


def verify_lower_bound(
    details: list[RoundDetail],
    w_star,
    *,
    momentum: bool,
    tol: float = DEFAULT_TOL,
    residual_tol: float = RESIDUAL_TOL,
    inject: float = 1.0,
) -> LowerBoundReport:
    """Check eta_optimal >= eta_applied on every eligible round of a trace.

    Rounds are excluded (and reported) when the direction is degenerate,
    when the round's projection condition fails, or, for the momentum
    variant, once an earlier round's step exceeded its own inversion target,
    which voids the bound's hypothesis from then on. Every eligible round
    additionally self-checks that the applied step actually solves the
    slope equation it is defined by.
    """
    ws = as_vector(w_star, name="w_star")
    report = LowerBoundReport()
    prior_ok = True
    for d in details:
        if d.skipped or not np.any(d.direction):
            report.excluded.append({"round": d.round_index, "reason": "degenerate-direction"})
            continue
        apc = check_apc(d.w_before, d.updates, ws, round_index=d.round_index, tol=tol)
        holds = apc.strong_apc_holds if momentum else apc.apc_holds
        if not holds:
            report.excluded.append({"round": d.round_index, "reason": "projection-condition"})
            continue
        gen = d.generator
        theta = mirror_map(gen, d.w_before)
        eta_checked = d.eta_g * inject

        residual = dual_slope(gen, theta, d.w_before, d.direction, eta_checked) - d.numerator
        if abs(residual) > residual_tol * max(1.0, d.numerator):
            report.residual_violations.append(
                {"round": d.round_index, "residual": residual, "numerator": d.numerator}
            )

        if momentum and not prior_ok:
            report.excluded.append({"round": d.round_index, "reason": "prior-step-hypothesis"})
            continue

        if isinstance(gen, QuadraticGenerator):
            eta_star = float(np.dot(ws - d.w_before, d.direction)) / weighted_norm_sq(
                d.direction, gen.diag, inverse=True
            )
        else:
            eta_star = optimal_step_oracle(
                gen,
                theta,
                d.w_before,
                d.direction,
                ws,
                eta_max=4.0 * max(eta_checked, 1.0) + 1.0,
            )[1]
        if eta_star < eta_checked - tol * max(1.0, abs(eta_star)):
            report.violations.append(
                {"round": d.round_index, "eta_star": eta_star, "eta_g": eta_checked}
            )
        report.checked += 1

        if momentum:
            slope_used = dual_slope(gen, theta, d.w_before, d.direction, eta_checked)
            if slope_used > d.numerator + residual_tol * max(1.0, d.numerator):
                prior_ok = False
    return report


@dataclass
class SuiteReport:
    name: str
    cases: int
    checked_rounds: int
    violations: list[dict]
    excluded: int
    inconclusive: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cases": self.cases,
            "checked_rounds": self.checked_rounds,
            "violations": self.violations,
            "excluded": self.excluded,
            "inconclusive": self.inconclusive,
            "ok": self.ok,
        }


_CASE_GRID = [(d, m) for d in (10, 50) for m in (2, 5, 10)]


def _suite_instance(case: int, seed: int) -> tuple[FederationInstance, int, int]:
    dim, clients = _CASE_GRID[case % len(_CASE_GRID)]
    samples = max(1, (dim - 1) // (2 * clients))
    inst = random_interpolation_instance(dim, clients, samples, seed * 100_003 + case)
    return inst, dim, clients


def _random_diag(dim: int, case: int, seed: int) -> Array:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, case, 0xD1A6]))
    return 10.0 ** rng.uniform(-1.0, 1.0, dim)


def _lower_bound_suite(
    name: str,
    *,
    momentum: bool,
    num_cases: int,
    rounds: int,
    seed: int,
    beta1s: tuple[float, ...],
    inject: float,
) -> SuiteReport:
    violations: list[dict] = []
    excluded = 0
    checked = 0
    for case in range(num_cases):
        inst, dim, clients = _suite_instance(case, seed)
        if momentum:
            beta1 = beta1s[case % len(beta1s)]
            opt_cfgs = [
                ("fedduadam", OptimizerConfig(family="fedduadam", epsilon=0.0, epsilon_g=0.0, beta1=beta1)),
            ]
        else:
            opt_cfgs = [
                ("fedduadagrad", OptimizerConfig(family="fedduadagrad", epsilon=0.0, epsilon_g=0.0)),
                (
                    "feddua-generic",
                    OptimizerConfig(
                        family="feddua-generic",
                        epsilon_g=0.0,
                        generator=QuadraticGenerator(_random_diag(dim, case, seed)),
                    ),
                ),
            ]
        for label, opt in opt_cfgs:
            cfg = RunConfig(
                rounds=rounds,
                clients_per_round=clients,
                local=LocalConfig(strategy="exact-projection"),
                optimizer=opt,
                seed=seed * 7 + case,
            )
            result = run(cfg, inst, collect_details=True)
            rep = verify_lower_bound(result.details, inst.w_star, momentum=momentum, inject=inject)
            checked += rep.checked
            excluded += len(rep.excluded)
            for v in rep.violations:
                violations.append({"case": case, "optimizer": label, "kind": "bound", **v})
            for v in rep.residual_violations:
                violations.append({"case": case, "optimizer": label, "kind": "residual", **v})
    return SuiteReport(
        name=name,
        cases=num_cases,
        checked_rounds=checked,
        violations=violations,
        excluded=excluded,
        inconclusive=0,
    )


def theorem1_suite(num_cases: int = 100, rounds: int = 50, seed: int = 0, inject: float = 1.0) -> SuiteReport:
    """Lower-bound audit without momentum over random exact-projection runs,
    once with evolving accumulator geometry and once with a fixed random
    positive-diagonal geometry per case."""
    return _lower_bound_suite(
        "theorem1",
        momentum=False,
        num_cases=num_cases,
        rounds=rounds,
        seed=seed,
        beta1s=(),
        inject=inject,
    )


def theorem2_suite(
    num_cases: int = 100,
    rounds: int = 50,
    seed: int = 0,
    beta1s: tuple[float, ...] = (0.5, 0.9),
    inject: float = 1.0,
) -> SuiteReport:
    """Momentum lower-bound audit; cases alternate between momentum factors."""
    return _lower_bound_suite(
        "theorem2",
        momentum=True,
        num_cases=num_cases,
        rounds=rounds,
        seed=seed,
        beta1s=beta1s,
        inject=inject,
    )


def theorem3_suite(
    num_cases: int = 100,
    num_points: int = 10_000,
    seed: int = 0,
    inject: float = 1.0,
    kinds: tuple[str, ...] = ("quadratic", "cosh"),
) -> SuiteReport:
    """Minimax audit on random (weights, updates, geometry) triples.

    The quadratic kind uses random positive diagonals and the closed-form
    step; the cosh kind recovers the step by bisection. Both are then
    checked against the brute-force grid argmin.
    """
    violations: list[dict] = []
    inconclusive = 0
    checked = 0
    for case in range(num_cases):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, case, 0x7431]))
        dim = int(rng.choice([10, 50]))
        clients = int(rng.choice([2, 5, 10]))
        w = rng.normal(0.0, 1.0, dim)
        updates = [
            ClientUpdate.from_delta(rng.normal(0.0, 0.5, dim), cid) for cid in range(clients)
        ]
        for kind in kinds:
            if kind == "quadratic":
                gen: DistanceGenerator = QuadraticGenerator(10.0 ** rng.uniform(-1.0, 1.0, dim))
            elif kind == "cosh":
                gen = cosh_generator()
            else:
                raise FedMirrorError(f"unknown generator kind {kind!r}")
            try:
                case_report = verify_minimax(
                    gen, w, updates, num_points=num_points, inject=inject
                )
            except InconclusiveError:
                inconclusive += 1
                continue
            checked += 1
            if not case_report.ok:
                violations.append(
                    {
                        "case": case,
                        "kind": kind,
                        "eta": case_report.eta_checked,
                        "grid_argmin": case_report.grid_argmin,
                        "convex_ok": case_report.convex_ok,
                        "argmin_ok": case_report.argmin_ok,
                        "residual": case_report.residual,
                    }
                )
    return SuiteReport(
        name="theorem3",
        cases=num_cases,
        checked_rounds=checked,
        violations=violations,
        excluded=0,
        inconclusive=inconclusive,
    )


SUITES = {
    "theorem1": theorem1_suite,
    "theorem2": theorem2_suite,
    "theorem3": theorem3_suite,
}
