"""Scenario configuration, AP/user placement, large-scale gains, pilots and clusters.

All link gains are stored linear and normalized by the receiver noise power,
so ``p * beta`` is an SNR when ``p`` is in mW.
"""

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FactorizationError

PATHLOSS_SLOPE_DB = 36.7
PATHLOSS_OFFSET_DB = 30.5
THERMAL_NOISE_DBM_HZ = -174.0


class CsiRegime(str, enum.Enum):
    MULTI_CELL = "MultiCell"
    CELL_FREE_LOCAL = "CellFreeLocal"
    CELL_FREE_CENTRALIZED = "CellFreeCentralized"
    CELL_FREE_MIXED = "CellFreeMixed"


@dataclass(frozen=True)
class Scenario:
    area_side: float = 500.0
    num_aps: int = 16
    antennas_per_ap: int = 8
    num_users: int = 32
    height_diff: float = 10.0
    shadow_std: float = 4.0
    shadow_decorr: float = 9.0
    bandwidth: float = 20e6
    noise_figure: float = 7.0
    pilot_len: int = 10
    pilot_power_dbm: float = 20.0
    max_user_power_dbm: float = 20.0
    cluster_size: int = 4
    csi_regime: CsiRegime = CsiRegime.CELL_FREE_CENTRALIZED

    def __post_init__(self):
        object.__setattr__(self, "csi_regime", CsiRegime(self.csi_regime))
        for name in ("num_aps", "antennas_per_ap", "num_users", "pilot_len", "cluster_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1", name)
        if self.cluster_size > self.num_aps:
            raise ConfigError("cluster size cannot exceed the number of APs", "cluster_size")
        if not self.area_side > 0:
            raise ConfigError("must be positive", "area_side")
        if self.shadow_std < 0:
            raise ConfigError("must be nonnegative", "shadow_std")
        if not self.shadow_decorr > 0:
            raise ConfigError("must be positive", "shadow_decorr")
        if not self.bandwidth > 0:
            raise ConfigError("must be positive", "bandwidth")

    @classmethod
    def full(cls):
        """The 500 m x 500 m, 16-AP, 32-user setup with 20 dBm powers."""
        return cls()

    @classmethod
    def desk(cls, **overrides):
        """Reduced network used for property checks."""
        base = dict(num_aps=4, antennas_per_ap=2, num_users=8, pilot_len=4, cluster_size=2)
        base.update(overrides)
        return cls(**base)

    @property
    def noise_power_dbm(self):
        return THERMAL_NOISE_DBM_HZ + 10 * math.log10(self.bandwidth) + self.noise_figure

    @property
    def pilot_power(self):
        return dbm_to_mw(self.pilot_power_dbm)

    @property
    def max_user_power(self):
        return dbm_to_mw(self.max_user_power_dbm)


def dbm_to_mw(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


# JSON key -> Scenario field
_SCENARIO_KEYS = {
    "area_side_m": "area_side",
    "num_aps": "num_aps",
    "antennas_per_ap": "antennas_per_ap",
    "num_users": "num_users",
    "height_diff_m": "height_diff",
    "shadow_std_db": "shadow_std",
    "shadow_decorr_m": "shadow_decorr",
    "bandwidth_hz": "bandwidth",
    "noise_figure_db": "noise_figure",
    "pilot_len": "pilot_len",
    "pilot_power_dbm": "pilot_power_dbm",
    "max_user_power_dbm": "max_user_power_dbm",
    "cluster_size": "cluster_size",
    "csi_regime": "csi_regime",
}
_RUN_KEYS = ("master_seed", "num_drops", "num_samples")
_INT_KEYS = {"num_aps", "antennas_per_ap", "num_users", "pilot_len", "cluster_size",
             "master_seed", "num_drops", "num_samples"}


@dataclass(frozen=True)
class Config:
    scenario: Scenario
    master_seed: int = 0
    num_drops: int = 1
    num_samples: int = 1000

    def to_dict(self):
        out = {key: getattr(self.scenario, attr) for key, attr in _SCENARIO_KEYS.items()}
        out["csi_regime"] = self.scenario.csi_regime.value
        out.update(master_seed=self.master_seed, num_drops=self.num_drops,
                   num_samples=self.num_samples)
        return out


def parse_config(doc):
    """Validate a configuration mapping; keys must match exactly."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    expected = set(_SCENARIO_KEYS) | set(_RUN_KEYS)
    missing = sorted(expected - set(doc))
    unknown = sorted(set(doc) - expected)
    if missing:
        raise ConfigError("missing key", missing[0])
    if unknown:
        raise ConfigError("unknown key", unknown[0])
    values = {}
    for key in expected:
        v = doc[key]
        if key == "csi_regime":
            try:
                values[key] = CsiRegime(v)
            except ValueError:
                raise ConfigError(f"expected one of {[r.value for r in CsiRegime]}", key) from None
        elif key in _INT_KEYS:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError("expected an integer", key)
            values[key] = v
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError("expected a number", key)
            values[key] = float(v)
    if values["num_drops"] < 1:
        raise ConfigError("must be >= 1", "num_drops")
    if values["num_samples"] < 2:
        raise ConfigError("must be >= 2", "num_samples")
    try:
        scenario = Scenario(**{attr: values[key] for key, attr in _SCENARIO_KEYS.items()})
    except ConfigError as exc:
        inverse = {attr: key for key, attr in _SCENARIO_KEYS.items()}
        raise ConfigError(str(exc).split(": ", 1)[-1], inverse.get(exc.field, exc.field)) from None
    return Config(scenario, values["master_seed"], values["num_drops"], values["num_samples"])


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_config(doc)


@dataclass(frozen=True)
class Deployment:
    ap_positions: np.ndarray      # (L, 2) meters
    user_positions: np.ndarray    # (K, 2) meters
    gains: np.ndarray             # (L, K) linear, noise-normalized
    cell_of: np.ndarray           # (K,)
    pilot_of: np.ndarray = None   # (K,)
    clusters: list = field(default=None)  # K arrays of AP indices

    @property
    def num_aps(self):
        return self.gains.shape[0]

    @property
    def num_users(self):
        return self.gains.shape[1]

    @property
    def copilot_sets(self):
        return [np.flatnonzero(self.pilot_of == self.pilot_of[k]) for k in range(self.num_users)]

    @property
    def cluster_mask(self):
        """(L, K) boolean serving mask."""
        return cluster_mask(self.clusters, self.num_aps)

    def with_clusters(self, clusters):
        return dataclasses.replace(self, clusters=[np.asarray(c, dtype=int) for c in clusters])


def cluster_mask(clusters, num_aps):
    mask = np.zeros((num_aps, len(clusters)), dtype=bool)
    for k, c in enumerate(clusters):
        mask[np.asarray(c, dtype=int), k] = True
    return mask


def channel_gain_db(distance, shadow, scenario):
    """Noise-normalized large-scale gain in dB for a 3-D ``distance`` in meters."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    return (-PATHLOSS_SLOPE_DB * np.log10(distance) - PATHLOSS_OFFSET_DB
            + np.asarray(shadow, dtype=float) - scenario.noise_power_dbm)


def _pairwise(a, b):
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def shadow_covariance(user_positions, scenario):
    delta = _pairwise(user_positions, user_positions)
    return scenario.shadow_std ** 2 * 2.0 ** (-delta / scenario.shadow_decorr)


def psd_factor(cov, jitter=1e-12, tol=1e-8):
    """Symmetric factor ``A`` with ``A @ A.T == cov`` (eigenvalues clamped at 0)."""
    cov = np.asarray(cov, dtype=float)
    if cov.size == 0:
        return cov
    w, u = np.linalg.eigh(cov + jitter * np.eye(cov.shape[0]))
    if w.min() < -tol * max(np.trace(cov), 1.0):
        raise FactorizationError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
    return (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T


def sample_shadowing(user_positions, scenario, rng, num_aps=None):
    """Correlated shadowing in dB, shape (L, K); independent across APs."""
    num_aps = scenario.num_aps if num_aps is None else num_aps
    user_positions = np.asarray(user_positions, dtype=float)
    k = user_positions.shape[0]
    if scenario.shadow_std == 0:
        return np.zeros((num_aps, k))
    factor = psd_factor(shadow_covariance(user_positions, scenario))
    return rng.standard_normal((num_aps, k)) @ factor.T


def ap_grid(scenario):
    side = math.isqrt(scenario.num_aps)
    if side * side != scenario.num_aps:
        raise ConfigError("grid layout needs a perfect-square number of APs", "num_aps")
    spacing = scenario.area_side / side
    coords = (np.arange(side) + 0.5) * spacing
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def assign_pilots(deployment, pilot_len):
    """Round-robin pilots per cell, users in index order, starting at pilot 0."""
    cell_of = np.asarray(getattr(deployment, "cell_of", deployment))
    pilot_of = np.empty(len(cell_of), dtype=int)
    for cell in np.unique(cell_of):
        members = np.flatnonzero(cell_of == cell)
        pilot_of[members] = np.arange(len(members)) % pilot_len
    return pilot_of


def select_clusters(deployment, scenario, regime=None):
    """Serving AP sets: strongest AP for multi-cell, top-Q APs otherwise."""
    regime = CsiRegime(scenario.csi_regime if regime is None else regime)
    gains = deployment.gains
    if regime is CsiRegime.MULTI_CELL:
        return [np.array([l]) for l in np.argmax(gains, axis=0)]
    order = np.argsort(-gains, axis=0, kind="stable")
    return [np.sort(order[: scenario.cluster_size, k]) for k in range(gains.shape[1])]


def place_network(scenario, rng):
    aps = ap_grid(scenario)
    users = rng.uniform(0.0, scenario.area_side, size=(scenario.num_users, 2))
    dist = np.sqrt(_pairwise(aps, users) ** 2 + scenario.height_diff ** 2)
    shadow = sample_shadowing(users, scenario, rng)
    gains = 10.0 ** (channel_gain_db(dist, shadow, scenario) / 10.0)
    dep = Deployment(aps, users, gains, np.argmax(gains, axis=0))
    dep = dataclasses.replace(dep, pilot_of=assign_pilots(dep, scenario.pilot_len))
    return dep.with_clusters(select_clusters(dep, scenario))
