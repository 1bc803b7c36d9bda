"""The budgeted information-collection-and-optimisation loop.

Each iteration values one more simulation against one more sample from
each external data source and performs whichever action is worth more,
updating the corresponding model. Also provides the fixed-fraction and
uniform-random baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import acquisition as acq
from . import gp
from .errors import ConfigError
from .optim import BoxBounds, lhs_sample
from .posterior import (
    ParameterPosterior,
    SourceDataset,
    SourceSpec,
    update_posterior,
)
from .testbeds import TruthOracle, opportunity_cost

Simulator = Callable[[np.ndarray, np.ndarray, np.random.Generator], float]
SourceQuery = Callable[[int, np.random.Generator], float]


@dataclass(frozen=True)
class Action:
    """Either simulate at a joint point or query a parameter data source."""

    kind: str  # "simulate" | "query"
    point: gp.JointPoint | None = None
    source: int | None = None

    def __post_init__(self):
        if self.kind == "simulate":
            if self.point is None or self.source is not None:
                raise ValueError("simulate action needs a point and no source")
        elif self.kind == "query":
            if self.source is None or self.point is not None:
                raise ValueError("query action needs a source and no point")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @classmethod
    def simulate(cls, point: gp.JointPoint) -> "Action":
        return cls("simulate", point=point)

    @classmethod
    def query(cls, source: int) -> "Action":
        return cls("query", source=source)


@dataclass
class BudgetLedger:
    """Tracks consumed budget against per-action costs."""

    total: float
    sim_cost: float
    source_costs: dict[int, float]
    spent: float = 0.0

    def __post_init__(self):
        if self.total <= 0 or self.sim_cost <= 0 or any(c <= 0 for c in self.source_costs.values()):
            raise ConfigError("budget and action costs must be positive")

    @property
    def exhausted(self) -> bool:
        return self.spent >= self.total

    def charge_simulation(self) -> None:
        self.spent += self.sim_cost

    def charge_query(self, source: int) -> None:
        self.spent += self.source_costs[source]


@dataclass(frozen=True)
class IterationLog:
    """One loop iteration: the chosen action, what it observed, and state."""

    t: int
    action: Action
    observed: float
    voi_sim: float | None
    voi_src: float | None
    x_r: np.ndarray | None
    oc: float | None
    spent: float


@dataclass(frozen=True)
class RunResult:
    x_r: np.ndarray
    iterations: list[IterationLog]
    m_final: int

    @property
    def n_simulations(self) -> int:
        return sum(1 for it in self.iterations if it.action.kind == "simulate")


@dataclass(frozen=True)
class BicoConfig:
    """Everything a run needs apart from the simulator and sources."""

    x_bounds: BoxBounds
    a_bounds: BoxBounds
    budget: float
    source_specs: tuple[SourceSpec, ...]
    sim_cost: float = 1.0
    n_init: int = 10
    n_posterior_samples: int = 100
    x_grid_size: int | None = None  # None -> 100 * solution dimension
    n_predictive_draws: int = 30
    inner_opt: acq.InnerOptConfig = field(default_factory=acq.InnerOptConfig)
    gp_shared_lengthscale: bool = True
    gp_hyper_restarts: int = 10
    gp_hyper_max_evals: int = 100
    gp_fixed_noise_sq: float | None = None
    preloaded_sources: tuple[tuple[int, float], ...] = ()
    track_recommendations: bool = True

    def __post_init__(self):
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if not self.source_specs:
            raise ConfigError("at least one source spec is required")

    @property
    def grid_size(self) -> int:
        return self.x_grid_size if self.x_grid_size is not None else 100 * self.x_bounds.dim

    @property
    def joint_bounds(self) -> BoxBounds:
        return self.x_bounds.concat(self.a_bounds)


def _simulate_with_retry(simulator: Simulator, x, a, rng) -> float:
    try:
        return float(simulator(x, a, rng))
    except Exception:
        try:
            return float(simulator(x, a, rng))
        except Exception as err:
            raise RuntimeError(f"simulator failed twice at the same point: {err}") from err


class _LoopState:
    """Shared machinery between the main loop and the baselines."""

    def __init__(self, cfg: BicoConfig, simulator: Simulator, query: SourceQuery,
                 truth: TruthOracle | None, rng: np.random.Generator):
        init_cost = cfg.n_init * cfg.sim_cost
        if cfg.budget < init_cost:
            raise ConfigError(
                f"budget {cfg.budget} cannot cover {cfg.n_init} initial simulations"
            )
        self.cfg = cfg
        self.simulator = simulator
        self.query = query
        self.truth = truth
        self.rng = rng
        self.ledger = BudgetLedger(
            cfg.budget, cfg.sim_cost, {s.id: s.cost for s in cfg.source_specs}
        )
        self.dataset = gp.SimulationDataset(cfg.x_bounds.dim, cfg.a_bounds.dim)
        self.source_data = SourceDataset(cfg.preloaded_sources)
        self.logs: list[IterationLog] = []
        self.t = 0

        for row in lhs_sample(cfg.n_init, cfg.joint_bounds, rng):
            point = gp.JointPoint(row[: cfg.x_bounds.dim], row[cfg.x_bounds.dim :])
            y = _simulate_with_retry(simulator, point.x, point.a, rng)
            self.dataset.append(point, y)
            self.ledger.charge_simulation()
        self.post = update_posterior(cfg.source_specs, self.source_data, cfg.a_bounds)
        self._refit()

    def _refit(self) -> None:
        cfg = self.cfg
        hyper = gp.fit_hyperparameters(
            self.dataset,
            restarts=cfg.gp_hyper_restarts,
            rng=self.rng,
            shared_lengthscale=cfg.gp_shared_lengthscale,
            fixed_noise_sq=cfg.gp_fixed_noise_sq,
            max_evals=cfg.gp_hyper_max_evals,
        )
        self.g = gp.fit(self.dataset, hyper)

    def fresh_disc(self) -> acq.DiscretizationSet:
        return acq.make_discretization(
            self.post, self.cfg.x_bounds, self.cfg.grid_size,
            self.cfg.n_posterior_samples, self.rng,
        )

    def do_simulate(self, point: gp.JointPoint) -> float:
        y = _simulate_with_retry(self.simulator, point.x, point.a, self.rng)
        self.dataset.append(point, y)
        self._refit()
        self.ledger.charge_simulation()
        return y

    def do_query(self, source: int) -> float:
        r = float(self.query(source, self.rng))
        self.source_data.append(source, r)
        self.post = update_posterior(self.cfg.source_specs, self.source_data, self.cfg.a_bounds)
        self.ledger.charge_query(source)
        return r

    def recommend(self, disc: acq.DiscretizationSet | None = None,
                  means: np.ndarray | None = None) -> np.ndarray:
        if disc is None:
            disc = self.fresh_disc()
            means = None
        return acq.recommend(
            self.g, self.post, disc, self.cfg.x_bounds, self.cfg.inner_opt, self.rng, means=means
        )

    def log(self, action: Action, observed: float,
            voi_sim: float | None, voi_src: float | None) -> None:
        self.t += 1
        x_r = self.recommend() if self.cfg.track_recommendations else None
        oc = None
        if x_r is not None and self.truth is not None:
            oc = opportunity_cost(x_r, self.truth)
        self.logs.append(
            IterationLog(self.t, action, observed, voi_sim, voi_src, x_r, oc, self.ledger.spent)
        )

    def finish(self) -> RunResult:
        x_r = self.recommend()
        m_final = sum(1 for it in self.logs if it.action.kind == "query")
        m_final += len(self.cfg.preloaded_sources)
        return RunResult(x_r, self.logs, m_final)


def run_bico(
    cfg: BicoConfig,
    simulator: Simulator,
    query_source: SourceQuery,
    truth: TruthOracle | None = None,
    rng: np.random.Generator | None = None,
) -> RunResult:
    """Budgeted loop choosing, each iteration, the higher-valued action.

    Initialises the surrogate from a Latin hypercube of simulations
    (charged to the budget), then repeatedly compares the best simulation
    VoI against the best source VoI. Simulations refit the surrogate and
    its hyperparameters; source queries update only the parameter
    posterior. Ties go to simulation.
    """
    if rng is None:
        rng = np.random.default_rng()
    state = _LoopState(cfg, simulator, query_source, truth, rng)
    while not state.ledger.exhausted:
        disc = state.fresh_disc()
        means = acq.grid_means(state.g, disc)
        sim_est = acq.max_voi_simulation(
            state.g, state.post, disc, cfg.joint_bounds, cfg.inner_opt,
            cfg.sim_cost, rng, means=means,
        )
        src_ests = [
            acq.voi_source(
                spec, state.g, state.post, state.source_data, cfg.source_specs,
                disc, cfg.n_predictive_draws, rng, means=means,
            )
            for spec in cfg.source_specs
        ]
        best_src = max(src_ests, key=lambda e: e.value)
        if sim_est.value >= best_src.value:
            y = state.do_simulate(sim_est.payload)
            state.log(Action.simulate(sim_est.payload), y, sim_est.value, best_src.value)
        else:
            r = state.do_query(best_src.payload)
            state.log(Action.query(best_src.payload), r, sim_est.value, best_src.value)
    return state.finish()


def run_fixed_fraction(
    p: float,
    cfg: BicoConfig,
    simulator: Simulator,
    query_source: SourceQuery,
    truth: TruthOracle | None = None,
    rng: np.random.Generator | None = None,
) -> RunResult:
    """Baseline: spend a fraction ``p`` of the budget on source queries first.

    After the initial simulations, query cost worth floor(budget * p) is
    spent on the sources in round-robin order (so the queries split evenly
    across sources), capped by the remaining budget; the rest of the
    budget goes to pure simulation sampling with the parameter posterior
    frozen.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng()
    state = _LoopState(cfg, simulator, query_source, truth, rng)

    target = np.floor(cfg.budget * p + 1e-12)
    spent_on_queries = 0.0
    order = sorted(cfg.source_specs, key=lambda s: s.id)
    i = 0
    while not state.ledger.exhausted:
        spec = order[i % len(order)]
        if spent_on_queries + spec.cost > target + 1e-12:
            break
        r = state.do_query(spec.id)
        spent_on_queries += spec.cost
        state.log(Action.query(spec.id), r, None, None)
        i += 1

    while not state.ledger.exhausted:
        disc = state.fresh_disc()
        means = acq.grid_means(state.g, disc)
        sim_est = acq.max_voi_simulation(
            state.g, state.post, disc, cfg.joint_bounds, cfg.inner_opt,
            cfg.sim_cost, rng, means=means,
        )
        y = state.do_simulate(sim_est.payload)
        state.log(Action.simulate(sim_est.payload), y, sim_est.value, None)
    return state.finish()


def run_random(
    cfg: BicoConfig,
    simulator: Simulator,
    query_source: SourceQuery,
    truth: TruthOracle | None = None,
    rng: np.random.Generator | None = None,
) -> RunResult:
    """Sanity-floor baseline: uniform simulation sampling, no source queries."""
    if rng is None:
        rng = np.random.default_rng()
    state = _LoopState(cfg, simulator, query_source, truth, rng)
    while not state.ledger.exhausted:
        row = rng.uniform(cfg.joint_bounds.lower, cfg.joint_bounds.upper)
        point = gp.JointPoint(row[: cfg.x_bounds.dim], row[cfg.x_bounds.dim :])
        y = state.do_simulate(point)
        state.log(Action.simulate(point), y, None, None)
    return state.finish()
