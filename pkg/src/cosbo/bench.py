"""Benchmark harness: scenario corpus, run matrix and convergence curves.

Every random stream is derived from ``master_seed`` and the run's
coordinates, so the whole matrix is a pure function of its configuration.
CoSBO and SafeOpt-MC runs with the same (scenario, parameter, start) share
one observation-noise stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import netsim
from .collaborative import CollaboratorRecord, CoSBO
from .gp import ContextualGP
from .safeopt import SafeOptMC

__all__ = [
    "ALGORITHMS",
    "GP_PROFILES",
    "Hyperparameters",
    "ExperimentConfig",
    "TraceRow",
    "RunTrace",
    "AggregateCurve",
    "CorpusError",
    "adjacent_parameter",
    "build_corpus",
    "pick_safe_starts",
    "run_random_baseline",
    "run_safe",
    "run_matrix",
    "run_single",
    "matrix_starts",
    "aggregate",
    "efficiency_gap",
    "plateau_iteration",
    "violation_counts",
    "write_results",
    "read_results",
    "write_aggregate",
    "config_overrides",
    "apply_overrides",
]

logger = logging.getLogger(__name__)

ALGORITHMS = ("cosbo", "safeopt_mc", "random")
GROUP_KEYS = ("parameter", "algorithm", "collaborator_mode", "gp_profile")
GP_PROFILES = {"default": 1.0, "smooth": 4.0}

# stream tags for SeedSequence entropy
_MAP, _START, _NOISE, _PRERUN, _RANDOM = range(5)


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    signal_variance: float = 0.5
    lengthscale: float | None = None  # None: taken from the GP profile
    lengthscale_z: float = 1.0
    noise_f: float = 1e-4
    noise_g: float = 1e-5
    beta: float = 2.0
    threshold: float = 0.4
    k: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    n_maps: int = 5
    load_levels: tuple = ("low", "medium", "high")
    n_starts: int = 10
    budget: int = 60
    algorithms: tuple = ALGORITHMS
    collaborator_mode: str = "best"
    gp_profile: str = "default"
    parameters: tuple = ("tilt", "beamwidth")
    master_seed: int = 0
    prerun_budget: int = 20
    start_margin: float = 0.1
    plateau_epsilon: float = 0.02
    max_regenerations: int = 20
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    map: netsim.MapConfig = field(default_factory=netsim.MapConfig)
    radio: netsim.RadioConfig = field(default_factory=netsim.RadioConfig)

    def __post_init__(self):
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ValueError(f"unknown algorithms {sorted(bad)}")
        if self.collaborator_mode not in ("best", "worst"):
            raise ValueError("collaborator_mode must be 'best' or 'worst'")
        if self.gp_profile not in GP_PROFILES:
            raise ValueError(f"gp_profile must be one of {list(GP_PROFILES)}")
        for p in self.parameters:
            netsim.default_grid(p)
        for level in self.load_levels:
            if level not in netsim.LOAD_LEVELS:
                raise ValueError(f"unknown load level {level!r}")

    @property
    def lengthscale(self):
        if self.hyper.lengthscale is not None:
            return self.hyper.lengthscale
        return GP_PROFILES[self.gp_profile]

    def optimizer(self, algorithm="safeopt_mc"):
        h = self.hyper
        common = dict(
            beta=h.beta,
            threshold=h.threshold,
            signal_variance=h.signal_variance,
            lengthscale_x=self.lengthscale,
            lengthscale_z=h.lengthscale_z,
            noise_f=h.noise_f,
            noise_g=h.noise_g,
        )
        if algorithm == "cosbo":
            return CoSBO(**common, k=h.k, collaborator_mode=self.collaborator_mode)
        return SafeOptMC(**common)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


# -- overrides ---------------------------------------------------------------

_SECTIONS = {"hyper": Hyperparameters, "map": netsim.MapConfig, "radio": netsim.RadioConfig}
_TOP_EXCLUDED = set(_SECTIONS)
_SECTION_EXCLUDED = {"map": {"seed"}}


def config_overrides():
    """Map every overridable key to ``(section or None, field)``."""
    keys = {}
    for f in fields(ExperimentConfig):
        if f.name not in _TOP_EXCLUDED:
            keys[f.name] = (None, f)
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name in _SECTION_EXCLUDED.get(section, ()):
                continue
            if f.name in keys:
                raise AssertionError(f"ambiguous override key {f.name}")
            keys[f.name] = (section, f)
    return keys


def _coerce(text, current):
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if current and isinstance(current[0], float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or current is None:
        if current is None and text.lower() == "none":
            return None
        return float(text)
    return text


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return ``config`` with ``{key: value-or-string}`` overrides applied."""
    keys = config_overrides()
    top, sections = {}, {}
    for key, value in overrides.items():
        if key not in keys:
            raise KeyError(f"unknown override {key!r}; valid keys: {', '.join(sorted(keys))}")
        section, f = keys[key]
        current = getattr(config if section is None else getattr(config, section), f.name)
        if isinstance(value, str):
            value = _coerce(value, current)
        if section is None:
            top[f.name] = value
        else:
            sections.setdefault(section, {})[f.name] = value
    for section, values in sections.items():
        top[section] = replace(getattr(config, section), **values)
    return replace(config, **top)


# -- corpus ------------------------------------------------------------------


def _seed_int(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _scenario_ok(scenario, config):
    h = config.hyper.threshold
    for name in config.parameters:
        g = scenario.tables[name].g_scaled
        if not (np.any(g < h) and np.any(g >= h + config.start_margin)):
            return False
    return True


def build_corpus(config: ExperimentConfig = ExperimentConfig()):
    """``n_maps * len(load_levels)`` tabulated scenarios, deterministic per seed.

    A map whose tables are flat or never cross the safety threshold is
    redrawn with a fresh seed (logged).
    """
    scenarios = []
    for m in range(config.n_maps):
        tried = []
        for attempt in range(config.max_regenerations):
            seed = _seed_int(config.master_seed, _MAP, m, attempt)
            tried.append(seed)
            try:
                realization = netsim.generate_map(replace(config.map, seed=seed))
                batch = [
                    netsim.build_scenario(
                        realization,
                        level,
                        config.radio,
                        scenario_id=f"m{m}-{level}",
                        parameters=config.parameters,
                    )
                    for level in config.load_levels
                ]
            except (netsim.ScalingError, netsim.MapGenerationError) as exc:
                logger.warning("map %d seed %d rejected: %s", m, seed, exc)
                continue
            if all(_scenario_ok(s, config) for s in batch):
                scenarios.extend(batch)
                break
            logger.warning("map %d seed %d rejected: safety table never crosses threshold", m, seed)
        else:
            raise CorpusError(f"map {m}: no valid map after seeds {tried}")
    return scenarios


def pick_safe_starts(scenario, parameter, n, rng, threshold=0.4, margin=0.1):
    """Grid indices drawn from ``{x : g_scaled(x) >= threshold + margin}``."""
    g = scenario.tables[parameter].g_scaled
    pool = np.flatnonzero(g >= threshold + margin)
    if pool.size == 0:
        raise ValueError(f"scenario {scenario.id}: no safe start region for {parameter}")
    replace_ = n > pool.size
    if replace_:
        logger.info("scenario %s/%s: %d starts from %d safe points, sampling with replacement",
                    scenario.id, parameter, n, pool.size)
    return rng.choice(pool, size=n, replace=replace_)


def adjacent_parameter(parameter):
    """Tilt runs borrow from beamwidth and vice versa."""
    return {"tilt": "beamwidth", "beamwidth": "tilt"}[parameter]


# -- traces ------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    index: int
    x: float
    f_raw: float
    f_scaled: float
    g_scaled: float
    f_obs: float
    g_obs: float
    lower_g: float  # NaN for the random baseline
    safe_flag: bool
    best_so_far: float


@dataclass
class RunTrace:
    scenario_id: str
    parameter: str
    algorithm: str
    start_index: int
    collaborator_mode: str = ""
    gp_profile: str = ""
    rows: list = field(default_factory=list)
    transferred: list = field(default_factory=list)  # (grid index, f, g)
    collaborator_id: str = ""
    z_c: float = math.nan
    error: str = ""
    x0_index: int = -1  # seed grid index of safe runs

    @property
    def best_so_far(self):
        return np.array([r.best_so_far for r in self.rows])

    @property
    def violations(self):
        return sum(not r.safe_flag for r in self.rows)


def _make_evaluator(table, config, rng):
    f, g = table.f_scaled, table.g_scaled
    h = config.hyper

    def evaluate(index):
        f_obs = netsim.noisy_eval(f, index, h.noise_f, rng)
        g_obs = netsim.noisy_eval(g, index, h.noise_g, rng)
        return f_obs, (g_obs,)

    return evaluate


def _rows_from(records, table, threshold, best):
    rows = []
    f_scaled, g_scaled = table.f_scaled, table.g_scaled
    for rec in records:
        i = rec.index
        best = max(best, float(f_scaled[i]))
        rows.append(
            TraceRow(
                iteration=rec.iteration,
                index=i,
                x=float(table.grid.points[i]),
                f_raw=float(table.f_raw[i]),
                f_scaled=float(f_scaled[i]),
                g_scaled=float(g_scaled[i]),
                f_obs=rec.f_obs,
                g_obs=rec.g_obs[0],
                lower_g=rec.lower_g[0] if rec.lower_g else math.nan,
                safe_flag=bool(g_scaled[i] >= threshold),
                best_so_far=best,
            )
        )
    return rows


@dataclass(frozen=True)
class _RandomRecord:
    iteration: int
    index: int
    f_obs: float
    g_obs: tuple
    lower_g: tuple = ()


def run_random_baseline(scenario, parameter, budget, rng, config: ExperimentConfig = ExperimentConfig()):
    """Uniform draws over the whole grid, ignoring safety."""
    table = scenario.tables[parameter]
    evaluate = _make_evaluator(table, config, rng)
    records = []
    for t in range(1, budget + 1):
        i = int(rng.integers(len(table.grid)))
        f_obs, g_obs = evaluate(i)
        records.append(_RandomRecord(t, i, f_obs, g_obs))
    return RunTrace(
        scenario.id,
        parameter,
        "random",
        -1,
        config.collaborator_mode,
        config.gp_profile,
        rows=_rows_from(records, table, config.hyper.threshold, -math.inf),
    )


def posterior_mean(table, config, which="f"):
    """Posterior mean on the grid of a GP fitted to every grid point."""
    grid = table.grid
    values = table.f_scaled if which == "f" else table.g_scaled
    noise = config.hyper.noise_f if which == "f" else config.hyper.noise_g
    gp = ContextualGP(config.hyper.signal_variance, config.lengthscale, config.hyper.lengthscale_z)
    gp.fit(grid.gp_inputs, values, noise)
    return gp.predict(grid.gp_inputs)


def collaborator_record(scenario, parameter, config):
    """What ``scenario`` shares as a collaborator for a main domain ``parameter``."""
    table_A = scenario.tables[parameter]
    table_B = scenario.tables[adjacent_parameter(parameter)]
    data_A = np.column_stack(
        [np.arange(len(table_A.grid)), posterior_mean(table_A, config, "f"), posterior_mean(table_A, config, "g")]
    )
    return CollaboratorRecord(scenario.id, posterior_mean(table_B, config, "f"), data_A)


def _prerun_posterior(scenario, parameter, start, config, start_index):
    """Main agent's X_B knowledge: a short SafeOpt-MC run on the adjacent parameter."""
    adjacent = adjacent_parameter(parameter)
    table = scenario.tables[adjacent]
    rng = _rng(config.master_seed, _PRERUN, *start_index)
    x0 = int(
        pick_safe_starts(scenario, adjacent, 1, rng, config.hyper.threshold, config.start_margin)[0]
    )
    evaluate = _make_evaluator(table, config, rng)
    opt = config.optimizer("safeopt_mc")
    f0, g0 = evaluate(x0)
    state = opt.run(opt.initialize(table.grid, x0, f0, g0), evaluate, config.prerun_budget)
    return state.gp_f.predict(table.grid.gp_inputs)


def run_safe(scenario, parameter, algorithm, start, x0, config, collaborators=(), key=(0, 0, 0)):
    """One CoSBO or SafeOpt-MC run from grid index ``x0``.

    ``key`` is ``(scenario position, parameter position, start)`` and fixes
    the random streams.
    """
    table = scenario.tables[parameter]
    rng = _rng(config.master_seed, _NOISE, *key)
    evaluate = _make_evaluator(table, config, rng)
    f0, g0 = evaluate(x0)
    opt = config.optimizer(algorithm)
    trace = RunTrace(scenario.id, parameter, algorithm, start, config.collaborator_mode, config.gp_profile)
    trace.x0_index = int(x0)
    if algorithm == "cosbo":
        main_B = _prerun_posterior(scenario, parameter, start, config, key) if collaborators else None
        state, transfer = opt.initialize_collaborative(table.grid, x0, f0, g0, collaborators, main_B)
        if transfer is not None:
            trace.collaborator_id = transfer.collaborator_id
            trace.z_c = transfer.z_c
            trace.transferred = [
                (int(i), float(v[0]), float(v[1])) for i, v in zip(transfer.indices, transfer.values)
            ]
    else:
        state = opt.initialize(table.grid, x0, f0, g0)
    state = opt.run(state, evaluate, config.budget)
    trace.rows = _rows_from(state.trace, table, config.hyper.threshold, float(table.f_scaled[x0]))
    return trace


# -- matrix ------------------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    scenario_pos: int
    parameter_pos: int
    algorithm: str
    start: int
    x0: int


def _run_task(task, scenarios, config, records):
    scenario = scenarios[task.scenario_pos]
    parameter = config.parameters[task.parameter_pos]
    key = (task.scenario_pos, task.parameter_pos, task.start)
    try:
        if task.algorithm == "random":
            rng = _rng(config.master_seed, _RANDOM, *key)
            trace = run_random_baseline(scenario, parameter, config.budget, rng, config)
            trace.start_index = task.start
            return trace
        collaborators = ()
        if task.algorithm == "cosbo":
            collaborators = [r for j, r in enumerate(records[parameter]) if j != task.scenario_pos]
        return run_safe(scenario, parameter, task.algorithm, task.start, task.x0, config, collaborators, key)
    except Exception as exc:  # recorded, the matrix goes on
        logger.exception("run failed: %s", task)
        return RunTrace(scenario.id, parameter, task.algorithm, task.start, config.collaborator_mode,
                        config.gp_profile, error=f"{type(exc).__name__}: {exc}")


_WORKER = {}


def _init_worker(scenarios, config, records):
    _WORKER.update(scenarios=scenarios, config=config, records=records)


def _run_in_worker(task):
    return _run_task(task, _WORKER["scenarios"], _WORKER["config"], _WORKER["records"])


def matrix_starts(scenario, scenario_pos, parameter_pos, config):
    """The safe starts used for one (scenario, parameter) cell of the matrix."""
    rng = _rng(config.master_seed, _START, scenario_pos, parameter_pos)
    parameter = config.parameters[parameter_pos]
    return pick_safe_starts(scenario, parameter, config.n_starts, rng, config.hyper.threshold, config.start_margin)


def run_single(scenarios, scenario_pos, parameter, algorithm, start, config: ExperimentConfig = ExperimentConfig()):
    """The trace ``run_matrix`` would produce for one task.

    The other ``scenarios`` act as collaborators. Errors propagate instead
    of being recorded.
    """
    if parameter not in config.parameters:
        raise ValueError(f"parameter {parameter!r} not in {config.parameters}")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if not 0 <= start < config.n_starts:
        raise ValueError(f"start must lie in [0, {config.n_starts})")
    pi = config.parameters.index(parameter)
    scenario = scenarios[scenario_pos]
    key = (scenario_pos, pi, start)
    if algorithm == "random":
        trace = run_random_baseline(scenario, parameter, config.budget, _rng(config.master_seed, _RANDOM, *key), config)
        trace.start_index = start
        return trace
    x0 = int(matrix_starts(scenario, scenario_pos, pi, config)[start])
    collaborators = ()
    if algorithm == "cosbo":
        collaborators = [collaborator_record(s, parameter, config) for j, s in enumerate(scenarios) if j != scenario_pos]
    return run_safe(scenario, parameter, algorithm, start, x0, config, collaborators, key)


def run_matrix(config: ExperimentConfig = ExperimentConfig(), scenarios=None, jobs=1):
    """One trace per (scenario, parameter, algorithm, start), in that order."""
    if scenarios is None:
        scenarios = build_corpus(config)
    records = {}
    if "cosbo" in config.algorithms:
        records = {p: [collaborator_record(s, p, config) for s in scenarios] for p in config.parameters}
    tasks = []
    for si, scenario in enumerate(scenarios):
        for pi, parameter in enumerate(config.parameters):
            starts = matrix_starts(scenario, si, pi, config)
            for algorithm in config.algorithms:
                for j, x0 in enumerate(starts):
                    tasks.append(_Task(si, pi, algorithm, j, int(x0)))
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(scenarios, config, records)) as pool:
            return list(pool.map(_run_in_worker, tasks, chunksize=4))
    return [_run_task(t, scenarios, config, records) for t in tasks]


# -- aggregation -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AggregateCurve:
    iterations: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    n_runs: int


def _padded(trace, budget):
    best = trace.best_so_far
    if best.size == 0:
        return None
    out = np.empty(budget)
    n = min(best.size, budget)
    out[:n] = best[:n]
    out[n:] = best[n - 1]
    return out


def aggregate(traces, keys=GROUP_KEYS, budget=None):
    """Pointwise median and interquartile band of best-so-far per group.

    Runs that stopped early carry their last best value forward. Quantiles
    use linear interpolation.
    """
    groups = {}
    for t in traces:
        if t.error or not t.rows:
            continue
        groups.setdefault(tuple(getattr(t, k) for k in keys), []).append(t)
    out = {}
    for key, members in sorted(groups.items()):
        length = budget or max(len(t.rows) for t in members)
        curves = np.array([_padded(t, length) for t in members])
        q25, med, q75 = np.quantile(curves, [0.25, 0.5, 0.75], axis=0, method="linear")
        out[key] = AggregateCurve(np.arange(1, length + 1), med, q25, q75, len(members))
    return out


def plateau_iteration(curve, epsilon=0.02):
    """First iteration (1-based) whose median is within ``epsilon`` of the
    final median, or ``len + 1`` if there is none."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    med = np.asarray(curve.median if hasattr(curve, "median") else curve, dtype=float)
    hit = np.flatnonzero(np.abs(med - med[-1]) <= epsilon)
    return int(hit[0]) + 1 if hit.size else med.size + 1


def efficiency_gap(curve_a, curve_b, epsilon=0.02):
    """Iterations by which ``curve_a`` reaches its plateau before ``curve_b``.

    A curve's plateau is the first iteration whose median lies within
    ``epsilon`` of the curve's final median. Positive means ``curve_a`` is
    faster.
    """
    return plateau_iteration(curve_b, epsilon) - plateau_iteration(curve_a, epsilon)


def violation_counts(traces):
    """True safety violations per algorithm."""
    counts = {}
    for t in traces:
        counts[t.algorithm] = counts.get(t.algorithm, 0) + t.violations
    return counts


# -- files -------------------------------------------------------------------

RESULT_COLUMNS = (
    "scenario_id", "parameter", "algorithm", "collaborator_mode", "gp_profile", "start_index",
    "iteration", "x", "f_raw", "f_scaled", "g_scaled", "safe_flag", "best_so_far",
    "collaborator_id", "z_c", "lower_g_at_selection", "f_obs", "g_obs",
)
CURVE_COLUMNS = ("iteration", "median", "q25", "q75", "n_runs")


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _atomic_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    tmp.replace(path)
    return path


def trace_rows(trace):
    for r in trace.rows:
        yield (
            trace.scenario_id, trace.parameter, trace.algorithm, trace.collaborator_mode, trace.gp_profile,
            trace.start_index, r.iteration, r.x, r.f_raw, r.f_scaled, r.g_scaled, r.safe_flag,
            r.best_so_far, trace.collaborator_id, trace.z_c, r.lower_g, r.f_obs, r.g_obs,
        )


def write_results(traces, path):
    return _atomic_csv(path, RESULT_COLUMNS, (row for t in traces for row in trace_rows(t)))


def read_results(path):
    """Rebuild traces (rows only) from a results file."""
    traces = {}
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            key = tuple(rec[c] for c in RESULT_COLUMNS[:6])
            t = traces.get(key)
            if t is None:
                z = rec["z_c"]
                t = traces[key] = RunTrace(
                    rec["scenario_id"], rec["parameter"], rec["algorithm"], int(rec["start_index"]),
                    rec["collaborator_mode"], rec["gp_profile"],
                    collaborator_id=rec["collaborator_id"], z_c=float(z) if z else math.nan,
                )
            lower = rec["lower_g_at_selection"]
            t.rows.append(
                TraceRow(
                    int(rec["iteration"]), -1, float(rec["x"]), float(rec["f_raw"]), float(rec["f_scaled"]),
                    float(rec["g_scaled"]), float(rec["f_obs"]), float(rec["g_obs"]),
                    float(lower) if lower else math.nan, rec["safe_flag"] == "1", float(rec["best_so_far"]),
                )
            )
    return list(traces.values())


def write_aggregate(curves, path, keys=GROUP_KEYS):
    def rows():
        for key, c in curves.items():
            for i in range(len(c.iterations)):
                yield (*key, int(c.iterations[i]), float(c.median[i]), float(c.q25[i]), float(c.q75[i]), c.n_runs)

    return _atomic_csv(path, (*keys, *CURVE_COLUMNS), rows())
