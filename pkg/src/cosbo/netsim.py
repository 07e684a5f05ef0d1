"""Synthetic radio-network scenarios.

A map holds Poisson-placed three-sector sites and uniformly dropped users.
One target cell has its tilt or horizontal beamwidth swept over a grid while
every other cell keeps the initial configuration; at each grid value we
compute per-user RSRP, interference, SINR and throughput and reduce them to
the performance and safety counts that the optimizers see.

Propagation is deliberately simple: a 3GPP-style parabolic sector pattern,
log-distance urban-macro path loss at 2 GHz and Shannon throughput scaled
by the cell's spare capacity under the given traffic load.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._validation import check_random_state
from .safeopt import ParameterGrid

__all__ = [
    "LOAD_LEVELS",
    "PARAMETERS",
    "SCHEMA",
    "MapConfig",
    "RadioConfig",
    "MapRealization",
    "UserMetrics",
    "ScenarioTable",
    "Scenario",
    "MapGenerationError",
    "ScalingError",
    "default_grid",
    "generate_map",
    "antenna_gain",
    "compute_user_metrics",
    "evaluate_beamwidth_objective",
    "evaluate_tilt_objective",
    "evaluate_safety",
    "nearest_rank_percentile",
    "measure_thresholds",
    "tabulate",
    "build_scenario",
    "noisy_eval",
    "scenario_to_dict",
    "scenario_from_dict",
    "save_scenario",
    "load_scenario",
]

logger = logging.getLogger(__name__)

SCHEMA = "cosbo.scenario/1"

#: total offered traffic per load level, bit/s
LOAD_LEVELS = {"low": 5e7, "medium": 15e7, "high": 25e7}

#: (low, high, n_points, degrees per GP input unit)
PARAMETERS = {
    "tilt": (0.0, 16.0, 101, 1.0),
    "beamwidth": (20.0, 160.0, 101, 10.0),
}


def default_grid(name) -> ParameterGrid:
    try:
        low, high, n, unit = PARAMETERS[name]
    except KeyError:
        raise ValueError(f"unknown parameter {name!r}; expected one of {sorted(PARAMETERS)}") from None
    return ParameterGrid.linspace(name, low, high, n, unit)


class MapGenerationError(RuntimeError):
    pass


class ScalingError(ValueError):
    """A tabulated function is flat, so Min-Max scaling is undefined."""


@dataclass(frozen=True)
class MapConfig:
    edge_length: float = 2000.0
    site_intensity: float = 4e-6
    min_intersite_distance: float = 400.0
    n_users: int = 1000
    sectors_per_site: int = 3
    n_bins: int = 5000  # recorded only; users are placed continuously
    indoor_probability: float = 0.5
    min_sites: int = 7
    max_sites: int = 12
    seed: int = 0


@dataclass(frozen=True)
class RadioConfig:
    tx_power_dbm: float = 46.0
    max_gain_dbi: float = 14.0
    vertical_beamwidth: float = 10.0
    max_attenuation_db: float = 25.0
    horizontal_sidelobe_db: float = 25.0
    vertical_sidelobe_db: float = 20.0
    noise_dbm: float = -104.0
    bandwidth_hz: float = 10e6
    min_distance: float = 35.0
    indoor_loss_db: tuple = (10.0, 30.0)  # uniform range per indoor user
    site_height: float = 25.0
    user_height: float = 1.5
    initial_tilt: float = 6.0
    initial_beamwidth: float = 65.0
    max_utilization: float = 0.99
    # users stay on the cell that served them at the initial configuration
    # while the target cell's parameter is swept
    fixed_association: bool = True


@dataclass(frozen=True, eq=False)
class MapRealization:
    config: MapConfig
    sites: np.ndarray  # (n_sites, 2) metres
    users: np.ndarray  # (n_users, 2) metres
    penetration: np.ndarray  # (n_users,) in [0, 1]; 0 = outdoor

    def penetration_loss_db(self, radio):
        lo, hi = radio.indoor_loss_db
        return np.where(self.penetration > 0, lo + (hi - lo) * self.penetration, 0.0)

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def n_cells(self):
        return self.n_sites * self.config.sectors_per_site

    @property
    def cell_site(self):
        return np.repeat(np.arange(self.n_sites), self.config.sectors_per_site)

    @property
    def cell_azimuth(self):
        per_site = np.arange(self.config.sectors_per_site) * 360.0 / self.config.sectors_per_site
        return np.tile(per_site, self.n_sites)


@dataclass(frozen=True, eq=False)
class UserMetrics:
    rsrp_serving: np.ndarray  # dBm
    interference: np.ndarray  # dBm
    sinr: np.ndarray  # dB
    throughput: np.ndarray  # bit/s
    serving_cell: np.ndarray

    def __len__(self):
        return len(self.rsrp_serving)


@dataclass(frozen=True, eq=False)
class ScenarioTable:
    """Raw and scaled function values of one parameter sweep."""

    grid: ParameterGrid
    f_raw: np.ndarray
    g_raw: np.ndarray
    f_scale: tuple
    g_scale: tuple

    @staticmethod
    def _scaled(values, scale):
        lo, hi = scale
        return (values - lo) / (hi - lo)

    @property
    def f_scaled(self):
        return self._scaled(self.f_raw, self.f_scale)

    @property
    def g_scaled(self):
        return self._scaled(self.g_raw, self.g_scale)


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    map: MapRealization
    load_level: str
    target_cell: tuple  # (site, sector)
    thresholds: tuple  # (h_interference, h_rsrp) dBm
    radio: RadioConfig = field(default_factory=RadioConfig)
    tables: dict = field(default_factory=dict)

    @property
    def traffic_volume(self):
        return LOAD_LEVELS[self.load_level]

    @property
    def target_index(self):
        site, sector = self.target_cell
        return site * self.map.config.sectors_per_site + sector


# -- map -------------------------------------------------------------------


def _draw_site_count(config, rng):
    mean = config.site_intensity * config.edge_length**2
    for _ in range(1000):
        n = int(rng.poisson(mean))
        if config.min_sites <= n <= config.max_sites:
            return n
    # intensity far outside the clamp range: fall back to a uniform count
    return int(rng.integers(config.min_sites, config.max_sites + 1))


def generate_map(config: MapConfig, max_attempts=50) -> MapRealization:
    """Hard-core Poisson site placement and uniform users, seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    L, r = config.edge_length, config.min_intersite_distance
    for _ in range(max_attempts):
        n_sites = _draw_site_count(config, rng)
        sites = []
        for _ in range(200 * n_sites):
            p = rng.uniform(0.0, L, size=2)
            if all(math.dist(p, s) >= r for s in sites):
                sites.append(p)
                if len(sites) == n_sites:
                    break
        if len(sites) == n_sites:
            users = rng.uniform(0.0, L, size=(config.n_users, 2))
            indoor = rng.random(config.n_users) < config.indoor_probability
            # strictly positive position inside the indoor loss range
            depth = np.where(indoor, 1.0 - rng.random(config.n_users), 0.0)
            return MapRealization(config, np.array(sites), users, depth)
    raise MapGenerationError(f"could not place {config.min_sites}+ sites for seed {config.seed}")


# -- radio -----------------------------------------------------------------


def antenna_gain(azimuth_offset, elevation_angle, tilt, h_beamwidth, radio: RadioConfig = RadioConfig()):
    """Sector antenna gain in dBi (parabolic horizontal and vertical cuts).

    ``azimuth_offset`` is measured from the sector boresight and
    ``elevation_angle`` downwards from the horizon, both in degrees.
    """
    if np.any(np.asarray(h_beamwidth) <= 0):
        raise ValueError("horizontal beamwidth must be positive")
    phi = (np.asarray(azimuth_offset, dtype=float) + 180.0) % 360.0 - 180.0
    a_h = -np.minimum(12.0 * (phi / h_beamwidth) ** 2, radio.horizontal_sidelobe_db)
    a_v = -np.minimum(
        12.0 * ((np.asarray(elevation_angle, dtype=float) - tilt) / radio.vertical_beamwidth) ** 2,
        radio.vertical_sidelobe_db,
    )
    return radio.max_gain_dbi - np.minimum(-(a_h + a_v), radio.max_attenuation_db)


def path_loss_db(distance_m, radio: RadioConfig = RadioConfig()):
    d = np.maximum(np.asarray(distance_m, dtype=float), radio.min_distance)
    return 128.1 + 37.6 * np.log10(d / 1000.0)


def _dbm_to_mw(x):
    return 10.0 ** (np.asarray(x) / 10.0)


def _mw_to_dbm(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)


@dataclass(frozen=True, eq=False)
class _Geometry:
    """User-to-cell distances and angles, independent of antenna settings."""

    distance: np.ndarray  # (n_users, n_cells)
    azimuth_offset: np.ndarray
    elevation: np.ndarray

    @classmethod
    def of(cls, m: MapRealization, radio: RadioConfig):
        site_xy = m.sites[m.cell_site]
        delta = m.users[:, None, :] - site_xy[None, :, :]
        distance = np.hypot(delta[..., 0], delta[..., 1])
        bearing = np.degrees(np.arctan2(delta[..., 0], delta[..., 1]))  # clockwise from north
        offset = bearing - m.cell_azimuth[None, :]
        elevation = np.degrees(
            np.arctan2(radio.site_height - radio.user_height, np.maximum(distance, radio.min_distance))
        )
        return cls(distance, offset, elevation)


_GEOMETRY_CACHE: dict = {}


def _geometry(m: MapRealization, radio: RadioConfig) -> _Geometry:
    key = (id(m), radio)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is None or hit[0] is not m:
        hit = (m, _Geometry.of(m, radio))
        if len(_GEOMETRY_CACHE) > 64:
            _GEOMETRY_CACHE.clear()
        _GEOMETRY_CACHE[key] = hit
    return hit[1]


def _cell_settings(scenario: Scenario, param_name=None, param_value=None):
    radio = scenario.radio
    n = scenario.map.n_cells
    tilt = np.full(n, radio.initial_tilt)
    beamwidth = np.full(n, radio.initial_beamwidth)
    if param_name == "tilt":
        tilt[scenario.target_index] = param_value
    elif param_name == "beamwidth":
        beamwidth[scenario.target_index] = param_value
    elif param_name is not None:
        raise ValueError(f"unknown parameter {param_name!r}")
    return tilt, beamwidth


def _rsrp_matrix(m, radio, tilt, beamwidth):
    geo = _geometry(m, radio)
    gain = antenna_gain(geo.azimuth_offset, geo.elevation, tilt[None, :], beamwidth[None, :], radio)
    loss = path_loss_db(geo.distance, radio) + m.penetration_loss_db(radio)[:, None]
    return radio.tx_power_dbm + gain - loss


def _metrics_from_rsrp(rsrp, traffic_volume, radio: RadioConfig, serving=None) -> UserMetrics:
    n_users, n_cells = rsrp.shape
    if serving is None:
        serving = np.argmax(rsrp, axis=1)
    rows = np.arange(n_users)
    lin = _dbm_to_mw(rsrp)
    signal = lin[rows, serving]
    interf = lin.sum(axis=1) - signal
    noise = _dbm_to_mw(radio.noise_dbm)
    sinr = signal / (interf + noise)
    rate = radio.bandwidth_hz * np.log2(1.0 + sinr)
    # processor sharing: each user keeps the fraction of airtime its cell
    # is not busy serving the offered load
    demand = traffic_volume / n_users
    busy = np.bincount(serving, weights=demand / rate, minlength=n_cells)
    utilization = np.minimum(busy, radio.max_utilization)
    throughput = (1.0 - utilization[serving]) * rate
    return UserMetrics(
        rsrp_serving=rsrp[rows, serving],
        interference=_mw_to_dbm(interf),
        sinr=10.0 * np.log10(sinr),
        throughput=throughput,
        serving_cell=serving,
    )


def compute_user_metrics(scenario: Scenario, param_name=None, param_value=None) -> UserMetrics:
    """Per-user metrics with the target cell's ``param_name`` set to ``param_value``.

    With no parameter given, every cell uses the initial configuration.
    If ``radio.fixed_association`` is set, users keep their initial serving
    cell instead of re-selecting the strongest one.
    """
    radio = scenario.radio
    serving = None
    if param_name is not None and radio.fixed_association:
        tilt0, bw0 = _cell_settings(scenario)
        serving = np.argmax(_rsrp_matrix(scenario.map, radio, tilt0, bw0), axis=1)
    tilt, beamwidth = _cell_settings(scenario, param_name, param_value)
    rsrp = _rsrp_matrix(scenario.map, radio, tilt, beamwidth)
    return _metrics_from_rsrp(rsrp, scenario.traffic_volume, radio, serving)


def evaluate_beamwidth_objective(metrics: UserMetrics, thresholds) -> int:
    """Users with interference below and RSRP above their thresholds."""
    h_int, h_rsrp = thresholds
    return int(np.count_nonzero((metrics.interference < h_int) & (metrics.rsrp_serving > h_rsrp)))


def evaluate_tilt_objective(metrics: UserMetrics) -> float:
    """Mean user throughput in bit/s."""
    return float(np.mean(metrics.throughput))


def evaluate_safety(metrics: UserMetrics, h_rsrp) -> int:
    """Users whose serving RSRP exceeds ``h_rsrp``."""
    return int(np.count_nonzero(np.asarray(metrics.rsrp_serving) > h_rsrp))


def nearest_rank_percentile(values, p):
    """Smallest value with at least ``p`` percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[rank - 1])


def measure_thresholds(metrics: UserMetrics):
    """``(h_interference, h_rsrp)``: median interference, 5th-percentile RSRP."""
    return (
        nearest_rank_percentile(metrics.interference, 50),
        nearest_rank_percentile(metrics.rsrp_serving, 5),
    )


def _min_max(values, what, scenario_id):
    lo, hi = float(np.min(values)), float(np.max(values))
    if not hi > lo:
        raise ScalingError(f"scenario {scenario_id}: {what} is flat ({lo}); cannot Min-Max scale")
    return lo, hi


def tabulate(scenario: Scenario, param_name, grid: ParameterGrid | None = None) -> ScenarioTable:
    """Sweep the target cell's parameter and tabulate f and g (raw and scale)."""
    grid = grid or default_grid(param_name)
    f_raw = np.empty(len(grid))
    g_raw = np.empty(len(grid))
    h_int, h_rsrp = scenario.thresholds
    for j, value in enumerate(grid.points):
        metrics = compute_user_metrics(scenario, param_name, value)
        if param_name == "tilt":
            f_raw[j] = evaluate_tilt_objective(metrics)
        else:
            f_raw[j] = evaluate_beamwidth_objective(metrics, scenario.thresholds)
        g_raw[j] = evaluate_safety(metrics, h_rsrp)
    return ScenarioTable(
        grid,
        f_raw,
        g_raw,
        _min_max(f_raw, f"{param_name} performance", scenario.id),
        _min_max(g_raw, f"{param_name} safety", scenario.id),
    )


def _pick_target_cell(m: MapRealization, metrics: UserMetrics):
    """Busiest sector of the site closest to the map centre."""
    centre = np.full(2, m.config.edge_length / 2.0)
    site = int(np.argmin(np.linalg.norm(m.sites - centre, axis=1)))
    spc = m.config.sectors_per_site
    counts = np.bincount(metrics.serving_cell, minlength=m.n_cells)[site * spc : (site + 1) * spc]
    return site, int(np.argmax(counts))


def build_scenario(
    m: MapRealization,
    load_level: str,
    radio: RadioConfig = RadioConfig(),
    scenario_id: str | None = None,
    parameters=("tilt", "beamwidth"),
) -> Scenario:
    """Measure thresholds at the initial configuration and tabulate."""
    if load_level not in LOAD_LEVELS:
        raise ValueError(f"load_level must be one of {list(LOAD_LEVELS)}")
    scenario_id = scenario_id or f"map{m.config.seed}-{load_level}"
    bare = Scenario(scenario_id, m, load_level, (0, 0), (0.0, 0.0), radio)
    initial = compute_user_metrics(bare)
    target = _pick_target_cell(m, initial)
    scenario = Scenario(scenario_id, m, load_level, target, measure_thresholds(initial), radio)
    for name in parameters:
        scenario.tables[name] = tabulate(scenario, name)
    return scenario


def noisy_eval(table_values, index, noise_variance, rng):
    """Table value at grid ``index`` plus zero-mean Gaussian noise."""
    rng = check_random_state(rng)
    value = float(np.asarray(table_values)[index])
    if noise_variance == 0:
        return value
    return value + float(rng.normal(0.0, math.sqrt(noise_variance)))


# -- files -----------------------------------------------------------------


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "schema": SCHEMA,
        "id": s.id,
        "map_config": asdict(s.map.config),
        "radio_config": asdict(s.radio),
        "sites": s.map.sites.tolist(),
        "cell_azimuths": s.map.cell_azimuth.tolist(),
        "users": s.map.users.tolist(),
        "penetration": s.map.penetration.tolist(),
        "load_level": s.load_level,
        "traffic_volume": s.traffic_volume,
        "target_cell": list(s.target_cell),
        "thresholds": {"h_interference": s.thresholds[0], "h_rsrp": s.thresholds[1]},
        "tables": {
            name: {
                "grid": t.grid.points.tolist(),
                "unit": t.grid.unit,
                "f_raw": t.f_raw.tolist(),
                "g_raw": t.g_raw.tolist(),
                "f_scale": list(t.f_scale),
                "g_scale": list(t.g_scale),
                "f_scaled": t.f_scaled.tolist(),
                "g_scaled": t.g_scaled.tolist(),
            }
            for name, t in s.tables.items()
        },
    }


def _dataclass_from(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unsupported scenario schema {d.get('schema')!r}")
    config = _dataclass_from(MapConfig, d["map_config"])
    m = MapRealization(config, np.array(d["sites"], dtype=float).reshape(-1, 2), np.array(d["users"], dtype=float), np.array(d["penetration"], dtype=float))
    tables = {
        name: ScenarioTable(
            ParameterGrid(name, np.array(t["grid"]), t["unit"]),
            np.array(t["f_raw"]),
            np.array(t["g_raw"]),
            tuple(t["f_scale"]),
            tuple(t["g_scale"]),
        )
        for name, t in d["tables"].items()
    }
    th = d["thresholds"]
    return Scenario(
        d["id"],
        m,
        d["load_level"],
        tuple(d["target_cell"]),
        (th["h_interference"], th["h_rsrp"]),
        _dataclass_from(RadioConfig, d["radio_config"]),
        tables,
    )


def save_scenario(s: Scenario, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(scenario_to_dict(s), indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))
