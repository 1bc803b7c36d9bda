"""Replicated experiment execution, persistence and aggregate reporting.

A JSON config describes one experiment (testbed, algorithm, budget,
knobs, replication count, master seed). Each replication derives its own
seed from the master seed via a 64-bit mix, runs independently, and
writes one JSON result plus one CSV iteration log; completed replications
are skipped on rerun. Reports aggregate opportunity cost and source-query
counts with normal-approximation confidence intervals. Opportunity-cost
columns are emitted raw; any log scaling is up to the plotting consumer.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .errors import ConfigError
from .gp import GpHyperparams
from .loop import (
    BicoConfig,
    IterationLog,
    RunResult,
    run_bico,
    run_fixed_fraction,
    run_random,
)
from .acquisition import InnerOptConfig
from .optim import BoxBounds
from .posterior import SourceSpec
from .testbeds import (
    NewsvendorConfig,
    gp_testfunc_build,
    gp_testfunc_simulate,
    make_newsvendor_oracle,
    newsvendor_simulate,
    opportunity_cost,
    source_simulate,
)

_TESTBEDS = ("newsvendor", "gp_1d", "gp_2d")
_ALGORITHMS = ("bico", "fixed_fraction", "random")
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def replication_seed(master_seed: int, rep: int) -> int:
    """Seed of replication ``rep``: splitmix64 finaliser of master + rep.

    A pure function of (master_seed, rep), so adding replications never
    changes the seeds of earlier ones.
    """
    return _splitmix64((int(master_seed) & _MASK64) + (rep + 1) * _GOLDEN)


@dataclass(frozen=True)
class AcquisitionParams:
    n_posterior_samples: int = 100
    x_grid_size: int | None = None  # None -> 100 per solution dimension
    n_predictive_draws: int = 30
    nm_restarts: int = 10
    nm_max_evals: int = 100

    def validate(self) -> None:
        for name in ("n_posterior_samples", "n_predictive_draws", "nm_restarts", "nm_max_evals"):
            if getattr(self, name) < 1:
                raise ConfigError(f"acquisition.{name} must be >= 1")
        if self.x_grid_size is not None and self.x_grid_size < 1:
            raise ConfigError("acquisition.x_grid_size must be >= 1")


@dataclass(frozen=True)
class GpParams:
    shared_lengthscale: bool = True
    hyper_restarts: int = 10
    hyper_max_evals: int = 100
    fixed_noise_sq: float | None = None

    def validate(self) -> None:
        if self.hyper_restarts < 1 or self.hyper_max_evals < 1:
            raise ConfigError("gp.hyper_restarts and gp.hyper_max_evals must be >= 1")
        if self.fixed_noise_sq is not None and self.fixed_noise_sq < 0:
            raise ConfigError("gp.fixed_noise_sq must be nonnegative")


@dataclass(frozen=True)
class NewsvendorParams:
    price: float = 5.0
    cost: float = 3.0
    demand_var: float = 10.0
    true_mean: float = 40.0
    x_lo: float = 0.0
    x_hi: float = 100.0
    a_lo: float = 0.0
    a_hi: float = 100.0

    def validate(self) -> None:
        if not (self.price > self.cost > 0):
            raise ConfigError("testbed_params: need price > cost > 0")
        if self.demand_var <= 0:
            raise ConfigError("testbed_params.demand_var must be positive")
        if not (self.x_lo < self.x_hi and self.a_lo < self.a_hi):
            raise ConfigError("testbed_params: bounds must satisfy lo < hi")


@dataclass(frozen=True)
class GpTestbedParams:
    lengthscale: float = 10.0
    sigma0_sq: float = 1.0
    noise_sq: float = 0.01
    lo: float = 0.0
    hi: float = 100.0
    n_anchor: int | None = None

    def validate(self) -> None:
        if self.lengthscale <= 0 or self.sigma0_sq <= 0 or self.noise_sq < 0:
            raise ConfigError("testbed_params: GP testbed scales must be positive")
        if not self.lo < self.hi:
            raise ConfigError("testbed_params: bounds must satisfy lo < hi")
        if self.n_anchor is not None and self.n_anchor < 2:
            raise ConfigError("testbed_params.n_anchor must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    testbed: str
    master_seed: int
    algorithm: str = "bico"
    p: float | None = None
    budget: float = 0.0  # 0 -> testbed default (50 newsvendor, 100 gp)
    n_init: int = 10
    sim_cost: float = 1.0
    source_cost: float = 1.0
    source_noise_sq: float = 10.0
    replications: int = 100
    acquisition: AcquisitionParams = field(default_factory=AcquisitionParams)
    gp: GpParams = field(default_factory=GpParams)
    testbed_params: NewsvendorParams | GpTestbedParams | None = None

    def __post_init__(self):
        if self.testbed not in _TESTBEDS:
            raise ConfigError(f"testbed must be one of {_TESTBEDS}, got {self.testbed!r}")
        if self.algorithm not in _ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {_ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "fixed_fraction":
            if self.p is None:
                raise ConfigError("fixed_fraction needs field p")
            if not 0.0 <= self.p <= 1.0:
                raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        elif self.p is not None:
            raise ConfigError("field p is only valid for fixed_fraction")
        if self.budget == 0.0:
            object.__setattr__(self, "budget", 50.0 if self.testbed == "newsvendor" else 100.0)
        if self.budget < 0:
            raise ConfigError("budget must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if self.sim_cost <= 0 or self.source_cost <= 0:
            raise ConfigError("sim_cost and source_cost must be positive")
        if self.source_noise_sq <= 0:
            raise ConfigError("source_noise_sq must be positive")
        if self.testbed_params is None:
            default = NewsvendorParams() if self.testbed == "newsvendor" else GpTestbedParams()
            object.__setattr__(self, "testbed_params", default)
        expected = NewsvendorParams if self.testbed == "newsvendor" else GpTestbedParams
        if not isinstance(self.testbed_params, expected):
            raise ConfigError(f"testbed_params do not match testbed {self.testbed!r}")
        self.acquisition.validate()
        self.gp.validate()
        self.testbed_params.validate()

    @property
    def parameter_dim(self) -> int:
        return 2 if self.testbed == "gp_2d" else 1


def _from_mapping(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigError(f"invalid {where}: {err}") from err


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)
    testbed = data.get("testbed")
    if testbed not in _TESTBEDS:
        raise ConfigError(f"testbed must be one of {_TESTBEDS}, got {testbed!r}")
    if "master_seed" not in data:
        raise ConfigError("config needs field master_seed")
    for key, cls in (("acquisition", AcquisitionParams), ("gp", GpParams)):
        if key in data:
            data[key] = _from_mapping(cls, data[key], where=key)
    if "testbed_params" in data:
        cls = NewsvendorParams if testbed == "newsvendor" else GpTestbedParams
        data["testbed_params"] = _from_mapping(cls, data["testbed_params"], where="testbed_params")
    return _from_mapping(ExperimentConfig, data, where="config")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON experiment config, filling defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path}: {err}") from err
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------


def _source_values(cfg: ExperimentConfig) -> tuple[list[float], list[float]]:
    j = cfg.parameter_dim
    costs = [float(cfg.source_cost)] * j
    noises = [float(cfg.source_noise_sq)] * j
    return costs, noises


def build_problem(cfg: ExperimentConfig, rep_seed: int):
    """Instantiate (loop config, simulator, source query, truth, rng) for a seed."""
    ss_problem, ss_run = np.random.SeedSequence(rep_seed).spawn(2)
    run_rng = np.random.default_rng(ss_run)
    costs, noises = _source_values(cfg)
    specs = tuple(
        SourceSpec(id=j + 1, target_dim=j, obs_noise_sq=noises[j], cost=costs[j])
        for j in range(cfg.parameter_dim)
    )

    if cfg.testbed == "newsvendor":
        tp: NewsvendorParams = cfg.testbed_params
        nv = NewsvendorConfig(
            tp.price, tp.cost, tp.demand_var, tp.true_mean,
            BoxBounds([tp.x_lo], [tp.x_hi]), BoxBounds([tp.a_lo], [tp.a_hi]),
        )
        truth = make_newsvendor_oracle(nv)
        x_bounds, a_bounds = nv.x_bounds, nv.a_bounds

        def simulator(x, a, rng):
            return newsvendor_simulate(float(np.atleast_1d(x)[0]), float(np.atleast_1d(a)[0]), nv, rng)

    else:
        tp: GpTestbedParams = cfg.testbed_params
        j = cfg.parameter_dim
        x_bounds = BoxBounds([tp.lo], [tp.hi])
        a_bounds = BoxBounds([tp.lo] * j, [tp.hi] * j)
        hyper = GpHyperparams(tp.sigma0_sq, tp.lengthscale, tp.noise_sq)
        problem_seed = int(ss_problem.generate_state(1)[0])
        fn, truth = gp_testfunc_build(problem_seed, (1, j), hyper, tp.n_anchor, (x_bounds, a_bounds))

        def simulator(x, a, rng, _fn=fn):
            return gp_testfunc_simulate(_fn, x, a, rng)

    by_id = {s.id: s for s in specs}

    def query(source_id: int, rng):
        return source_simulate(by_id[source_id], truth.a_star, rng)

    loop_cfg = BicoConfig(
        x_bounds=x_bounds,
        a_bounds=a_bounds,
        budget=cfg.budget,
        source_specs=specs,
        sim_cost=cfg.sim_cost,
        n_init=cfg.n_init,
        n_posterior_samples=cfg.acquisition.n_posterior_samples,
        x_grid_size=cfg.acquisition.x_grid_size,
        n_predictive_draws=cfg.acquisition.n_predictive_draws,
        inner_opt=InnerOptConfig(cfg.acquisition.nm_restarts, cfg.acquisition.nm_max_evals),
        gp_shared_lengthscale=cfg.gp.shared_lengthscale,
        gp_hyper_restarts=cfg.gp.hyper_restarts,
        gp_hyper_max_evals=cfg.gp.hyper_max_evals,
        gp_fixed_noise_sq=cfg.gp.fixed_noise_sq,
    )
    return loop_cfg, simulator, query, truth, run_rng


# ---------------------------------------------------------------------------
# replication execution and persistence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicationResult:
    rep: int
    seed: int
    algorithm: str
    p: float | None
    oc: float
    m_final: int
    n_simulations: int
    x_r: list[float]


def _label(algorithm: str, p: float | None) -> str:
    return f"fixed_p{p:.2f}" if algorithm == "fixed_fraction" else algorithm


def run_replication(cfg: ExperimentConfig, rep: int) -> tuple[ReplicationResult, list[IterationLog]]:
    seed = replication_seed(cfg.master_seed, rep)
    loop_cfg, simulator, query, truth, rng = build_problem(cfg, seed)
    if cfg.algorithm == "bico":
        result: RunResult = run_bico(loop_cfg, simulator, query, truth, rng)
    elif cfg.algorithm == "fixed_fraction":
        result = run_fixed_fraction(cfg.p, loop_cfg, simulator, query, truth, rng)
    else:
        result = run_random(loop_cfg, simulator, query, truth, rng)
    oc = opportunity_cost(result.x_r, truth)
    rep_result = ReplicationResult(
        rep, seed, cfg.algorithm, cfg.p, oc, result.m_final,
        result.n_simulations, [float(v) for v in np.atleast_1d(result.x_r)],
    )
    return rep_result, result.iterations


def _iteration_rows(logs: list[IterationLog], d_sol: int, d_par: int) -> tuple[list[str], list[list]]:
    header = (
        ["t", "action_type"]
        + [f"x{k}" for k in range(d_sol)]
        + [f"a{k}" for k in range(d_par)]
        + ["s", "r", "y", "voi_sim", "voi_src"]
        + [f"xr{k}" for k in range(d_sol)]
        + ["oc", "b"]
    )
    rows = []
    for it in logs:
        if it.action.kind == "simulate":
            xs = [repr(float(v)) for v in it.action.point.x]
            avs = [repr(float(v)) for v in it.action.point.a]
            s, r, y = "", "", repr(float(it.observed))
        else:
            xs = [""] * d_sol
            avs = [""] * d_par
            s, r, y = str(it.action.source), repr(float(it.observed)), ""
        xr = [repr(float(v)) for v in it.x_r] if it.x_r is not None else [""] * d_sol
        rows.append(
            [it.t, it.action.kind, *xs, *avs, s, r, y,
             "" if it.voi_sim is None else repr(float(it.voi_sim)),
             "" if it.voi_src is None else repr(float(it.voi_src)),
             *xr,
             "" if it.oc is None else repr(float(it.oc)),
             repr(float(it.spent))]
        )
    return header, rows


def _result_payload(cfg: ExperimentConfig, res: ReplicationResult) -> dict:
    return {
        "version": __version__,
        "config": config_to_dict(cfg),
        "result": dataclasses.asdict(res),
    }


def _rep_paths(out_dir: Path, rep: int) -> tuple[Path, Path, Path]:
    stem = f"rep_{rep:05d}"
    return out_dir / f"{stem}.json", out_dir / f"{stem}_log.csv", out_dir / f"{stem}.failed.json"


def _execute_rep(cfg_dict: dict, rep: int, out_dir: str) -> str:
    """Worker entry point: run one replication and persist its files."""
    cfg = config_from_dict(cfg_dict)
    out = Path(out_dir)
    json_path, csv_path, failed_path = _rep_paths(out, rep)
    try:
        res, logs = run_replication(cfg, rep)
    except Exception as err:  # recorded, excluded from aggregates
        failed_path.write_text(json.dumps({"rep": rep, "error": str(err)}, indent=2) + "\n")
        return "failed"
    d_sol = 1
    d_par = cfg.parameter_dim
    header, rows = _iteration_rows(logs, d_sol, d_par)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    json_path.write_text(json.dumps(_result_payload(cfg, res), indent=2, sort_keys=True) + "\n")
    return "ok"


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, workers: int = 1) -> list[ReplicationResult]:
    """Run all replications (resuming over completed ones) and collect results."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_resolved = config_to_dict(cfg)
    pending = []
    for rep in range(cfg.replications):
        json_path, _, failed_path = _rep_paths(out, rep)
        if json_path.exists():
            stored = json.loads(json_path.read_text()).get("config")
            if stored != cfg_resolved:
                raise ConfigError(
                    f"{json_path} was produced by a different config; "
                    "use a fresh output directory"
                )
            continue
        if failed_path.exists():
            failed_path.unlink()
        pending.append(rep)
    cfg_dict = config_to_dict(cfg)
    if workers <= 1 or not pending:
        for rep in pending:
            _execute_rep(cfg_dict, rep, str(out))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_execute_rep, cfg_dict, rep, str(out)) for rep in pending]
            for fut in futures:
                fut.result()
    results = []
    for rep in range(cfg.replications):
        json_path, _, _ = _rep_paths(out, rep)
        if json_path.exists():
            payload = json.loads(json_path.read_text())
            results.append(ReplicationResult(**payload["result"]))
    return results


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupSummary:
    label: str
    algorithm: str
    p: float | None
    n_reps: int
    mean_oc: float
    ci_oc: float | None  # 1.96 * sd / sqrt(n); None when n < 2
    mean_m: float
    ci_m: float | None
    n_failed: int


@dataclass(frozen=True)
class AggregateReport:
    groups: list[GroupSummary]

    def by_label(self, label: str) -> GroupSummary:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(label)


def _ci_halfwidth(values: np.ndarray) -> float | None:
    if values.size < 2:
        return None
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def report(results_dir: str | Path) -> AggregateReport:
    """Aggregate every replication file below ``results_dir``.

    Groups by (algorithm, p) read from the result payloads, so directory
    layout does not matter; ordering is deterministic.
    """
    root = Path(results_dir)
    if not root.exists():
        raise ConfigError(f"results directory not found: {root}")
    rep_files = sorted(root.rglob("rep_*.json"))
    rep_files = [p for p in rep_files if not p.name.endswith(".failed.json")]
    if not rep_files:
        raise ConfigError(f"no replication results under {root}")
    by_group: dict[tuple[str, float | None], list[dict]] = {}
    group_dirs: dict[tuple[str, float | None], set[Path]] = {}
    for path in rep_files:
        payload = json.loads(path.read_text())
        res = payload["result"]
        key = (res["algorithm"], res["p"])
        by_group.setdefault(key, []).append(res)
        group_dirs.setdefault(key, set()).add(path.parent)
    failed_by_dir: dict[Path, int] = {}
    for path in root.rglob("rep_*.failed.json"):
        failed_by_dir[path.parent] = failed_by_dir.get(path.parent, 0) + 1
    groups = []
    for (algorithm, p) in sorted(by_group, key=lambda k: (k[0], -1.0 if k[1] is None else k[1])):
        rows = by_group[(algorithm, p)]
        ocs = np.asarray([r["oc"] for r in rows], dtype=float)
        ms = np.asarray([r["m_final"] for r in rows], dtype=float)
        failed = sum(failed_by_dir.get(d, 0) for d in group_dirs[(algorithm, p)])
        groups.append(
            GroupSummary(
                _label(algorithm, p), algorithm, p, len(rows),
                float(ocs.mean()), _ci_halfwidth(ocs),
                float(ms.mean()), _ci_halfwidth(ms),
                failed,
            )
        )
    return AggregateReport(groups)


def write_report(rep: AggregateReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write the summary table and the OC-vs-m curve data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = [dataclasses.asdict(g) for g in rep.groups]
    if fmt == "json":
        path = out / "summary.json"
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        written.append(path)
    elif fmt == "csv":
        path = out / "summary.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        written.append(path)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    curve = out / "oc_vs_m.csv"
    with curve.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "p", "mean_m", "ci_m", "mean_oc", "ci_oc"])
        for g in sorted(rep.groups, key=lambda g: g.mean_m):
            writer.writerow(
                [g.label, "" if g.p is None else g.p, g.mean_m,
                 "" if g.ci_m is None else g.ci_m, g.mean_oc,
                 "" if g.ci_oc is None else g.ci_oc]
            )
    written.append(curve)
    return written
