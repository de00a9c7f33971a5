"""Wideband geometric multipath channels and synthetic propagation environments.

The channel on subcarrier k is

    h_k = sqrt(N_T / L) * sum_l alpha_l * exp(-j 2 pi (k * df) tau_l) * a(phi_l)

with k counted from 0. The absolute first-subcarrier phase exp(-j 2 pi f_1 tau_l)
is folded into alpha_l (pass ``fold_carrier=False`` to apply it explicitly).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .container import DATASET_MAGIC, ContainerError, read_container, write_container

DATASET_VERSION = 1


@dataclass(frozen=True)
class SystemConfig:
    n_tx: int = 32
    n_sc: int = 32
    carrier_hz: float = 2.6e9
    bandwidth_hz: float = 10e6
    # (horizontal, vertical) element counts; None selects a ULA.
    upa_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.n_tx < 1 or self.n_sc < 1:
            raise ValueError("n_tx and n_sc must be >= 1")
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be positive")
        if self.upa_shape is not None:
            object.__setattr__(self, "upa_shape", tuple(int(v) for v in self.upa_shape))
            if len(self.upa_shape) != 2 or self.upa_shape[0] * self.upa_shape[1] != self.n_tx:
                raise ValueError("upa_shape must be (n_h, n_v) with n_h * n_v == n_tx")

    @property
    def subcarrier_spacing_hz(self) -> float:
        return self.bandwidth_hz / self.n_sc

    @property
    def max_delay_s(self) -> float:
        return 1.0 / self.subcarrier_spacing_hz

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("upa_shape") is not None:
            d["upa_shape"] = tuple(d["upa_shape"])
        return cls(**d)


@dataclass(frozen=True)
class PathParams:
    gain: complex
    aod_rad: float
    delay_s: float
    # Only used by the UPA array; zero elevation reduces the UPA to its horizontal ULA.
    elev_rad: float = 0.0


@dataclass(frozen=True)
class MultipathSet:
    paths: tuple[PathParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.paths:
            raise ValueError("a multipath set needs at least one path")

    def __len__(self):
        return len(self.paths)

    @property
    def gains(self):
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def aods(self):
        return np.array([p.aod_rad for p in self.paths], dtype=float)

    @property
    def delays(self):
        return np.array([p.delay_s for p in self.paths], dtype=float)

    @property
    def elevations(self):
        return np.array([p.elev_rad for p in self.paths], dtype=float)

    def scaled(self, c):
        return MultipathSet(tuple(dataclasses.replace(p, gain=p.gain * c) for p in self.paths))


@dataclass(frozen=True)
class EnvironmentSpec:
    env_id: str
    num_clusters: int = 2
    cluster_aod_centers_rad: tuple[float, ...] = (-0.4, 0.5)
    cluster_aod_spread_rad: float = 0.08
    rms_delay_spread_s: float = 200e-9
    los_probability: float = 0.5
    paths_per_cluster_range: tuple[int, int] = (1, 4)
    power_decay_per_cluster_db: float = 3.0
    rng_seed: int = 0
    # LOS power relative to the sum of all other paths (dB, >= 0 keeps LOS dominant).
    los_k_factor_db: float = 6.0
    elev_center_rad: float = 0.0
    elev_spread_rad: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cluster_aod_centers_rad",
                           tuple(float(c) for c in self.cluster_aod_centers_rad))
        object.__setattr__(self, "paths_per_cluster_range",
                           tuple(int(v) for v in self.paths_per_cluster_range))
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if len(self.cluster_aod_centers_rad) != self.num_clusters:
            raise ValueError("need one AoD center per cluster")
        if self.cluster_aod_spread_rad < 0 or self.rms_delay_spread_s <= 0 or self.elev_spread_rad < 0:
            raise ValueError("spreads must be non-negative (delay spread positive)")
        if not 0.0 <= self.los_probability <= 1.0:
            raise ValueError("los_probability must lie in [0, 1]")
        lo, hi = self.paths_per_cluster_range
        if not 1 <= lo <= hi:
            raise ValueError("paths_per_cluster_range must satisfy 1 <= lo <= hi")
        if self.los_k_factor_db < 0:
            raise ValueError("los_k_factor_db must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def steering_vector(aod_rad, n_tx):
    """Half-wavelength ULA response, unit norm."""
    t = np.arange(n_tx)
    return np.exp(1j * np.pi * t * np.sin(aod_rad)) / np.sqrt(n_tx)


def upa_steering_vector(aod_rad, elev_rad, upa_shape):
    """Kronecker (horizontal outer, vertical inner) of two half-wavelength ULAs."""
    n_h, n_v = upa_shape
    a_h = np.exp(1j * np.pi * np.arange(n_h) * np.sin(aod_rad) * np.cos(elev_rad))
    a_v = np.exp(1j * np.pi * np.arange(n_v) * np.sin(elev_rad))
    return np.kron(a_h, a_v) / np.sqrt(n_h * n_v)


def array_response(paths: MultipathSet, cfg: SystemConfig):
    """N_T x L matrix of steering vectors."""
    if cfg.upa_shape is None:
        t = np.arange(cfg.n_tx)[:, None]
        return np.exp(1j * np.pi * t * np.sin(paths.aods)[None, :]) / np.sqrt(cfg.n_tx)
    return np.stack([upa_steering_vector(p.aod_rad, p.elev_rad, cfg.upa_shape)
                     for p in paths.paths], axis=1)


def synthesize_channel(paths: MultipathSet, cfg: SystemConfig, fold_carrier=True):
    if not isinstance(paths, MultipathSet):
        paths = MultipathSet(tuple(paths))
    delays = paths.delays
    if np.any(delays < 0) or np.any(delays >= cfg.max_delay_s):
        raise ValueError("path delays must lie in [0, 1/df)")
    gains = paths.gains
    if not fold_carrier:
        gains = gains * np.exp(-2j * np.pi * cfg.carrier_hz * delays)
    L = len(paths)
    k = np.arange(cfg.n_sc)
    freq = np.exp(-2j * np.pi * cfg.subcarrier_spacing_hz * np.outer(delays, k))  # L x N_c
    A = array_response(paths, cfg)
    return np.sqrt(cfg.n_tx / L) * (A * gains[None, :]) @ freq


def _clip_aod(x):
    lim = np.pi / 2 - 1e-6
    return np.clip(x, -lim, lim)


def sample_multipath(env: EnvironmentSpec, rng: np.random.Generator, cfg: SystemConfig = SystemConfig()):
    """Draw one multipath realisation from an environment.

    Per-cluster AoDs are uniform around the cluster centre; delays are sorted
    exponential draws clipped to the unambiguous window; gains are CN(0, 1)
    shaped by an exponential power-delay profile and a per-cluster decay.
    With probability ``los_probability`` the earliest path of cluster 0 is
    turned into a LOS path at zero delay carrying K times the power of all
    other paths. Gains are normalised so that sum |alpha|^2 = L.
    """
    lo, hi = env.paths_per_cluster_range
    counts = rng.integers(lo, hi + 1, size=env.num_clusters)
    cluster = np.repeat(np.arange(env.num_clusters), counts)
    L = cluster.size
    centers = np.asarray(env.cluster_aod_centers_rad)[cluster]
    aod = _clip_aod(centers + rng.uniform(-1.0, 1.0, L) * env.cluster_aod_spread_rad)
    elev = env.elev_center_rad + rng.uniform(-1.0, 1.0, L) * env.elev_spread_rad
    delay = np.sort(rng.exponential(env.rms_delay_spread_s, L))
    delay = np.minimum(delay, np.nextafter(cfg.max_delay_s, 0.0))
    # sorted delays are handed out in cluster order, so cluster 0 arrives first
    pdp = np.exp(-delay / env.rms_delay_spread_s) * 10.0 ** (-cluster * env.power_decay_per_cluster_db / 10.0)
    gain = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / np.sqrt(2.0) * np.sqrt(pdp)
    los = rng.random() < env.los_probability
    if los:
        delay[0] = 0.0
        others = float(np.sum(np.abs(gain[1:]) ** 2))
        k_factor = 10.0 ** (env.los_k_factor_db / 10.0)
        power = k_factor * others if L > 1 else 1.0
        gain[0] = np.sqrt(power) * np.exp(1j * np.angle(gain[0]))
    total = float(np.sum(np.abs(gain) ** 2))
    if total <= 0.0:
        gain[:] = 1.0
        total = float(L)
    gain *= np.sqrt(L / total)
    return MultipathSet(tuple(
        PathParams(complex(g), float(a), float(d), float(e))
        for g, a, d, e in zip(gain, aod, delay, elev)
    ))


def sample_rng(env: EnvironmentSpec, seed, index):
    """Independent per-sample stream, derived by counter from (env seed, dataset seed)."""
    entropy = [int(env.rng_seed)] if seed is None else [int(env.rng_seed), int(seed)]
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(int(index),)))


@dataclass
class Dataset:
    channels: np.ndarray  # (n, N_T, N_c) complex128
    cfg: SystemConfig
    env_id: str
    seed: int | None = None
    env: EnvironmentSpec | None = None
    source: str = "synthetic"
    paths: list = field(default=None, repr=False)

    def __len__(self):
        return self.channels.shape[0]

    def header(self):
        return {
            "format": "egcsi-dataset",
            "version": DATASET_VERSION,
            "source": self.source,
            "env_id": self.env_id,
            "env": None if self.env is None else self.env.to_dict(),
            "cfg": self.cfg.to_dict(),
            "seed": self.seed,
            "n_samples": len(self),
            "n_tx": self.cfg.n_tx,
            "n_sc": self.cfg.n_sc,
            "layout": "float64-le interleaved re/im, row-major n_tx x n_sc per sample",
        }


class DatasetIOError(OSError):
    """Persisting or loading a dataset failed (as opposed to generating it)."""


def generate_dataset(env: EnvironmentSpec, n_samples: int, cfg: SystemConfig = SystemConfig(),
                     seed=None, keep_paths=False):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = np.empty((n_samples, cfg.n_tx, cfg.n_sc), dtype=complex)
    kept = [] if keep_paths else None
    for i in range(n_samples):
        paths = sample_multipath(env, sample_rng(env, seed, i), cfg)
        out[i] = synthesize_channel(paths, cfg)
        if keep_paths:
            kept.append(paths)
    return Dataset(out, cfg, env.env_id, seed, env, "synthetic", kept)


def from_array(channels, cfg: SystemConfig, env_id: str, source="external"):
    """Wrap externally produced channels (e.g. ray-traced) as a dataset."""
    channels = np.asarray(channels, dtype=complex)
    if channels.ndim == 2:
        channels = channels[None]
    if channels.shape[1:] != (cfg.n_tx, cfg.n_sc):
        raise ValueError(f"channel shape {channels.shape[1:]} does not match ({cfg.n_tx}, {cfg.n_sc})")
    if not np.all(np.isfinite(channels)):
        raise ValueError("non-finite channel entries")
    return Dataset(channels, cfg, env_id, None, None, source)


def save_dataset(path, ds: Dataset):
    payload = np.ascontiguousarray(ds.channels, dtype="<c16").tobytes()
    try:
        write_container(path, DATASET_MAGIC, ds.header(), payload)
    except OSError as exc:
        raise DatasetIOError(f"could not write dataset to {path}: {exc}") from exc


def load_dataset(path) -> Dataset:
    try:
        _, header, payload = read_container(path, DATASET_MAGIC)
    except OSError as exc:
        raise DatasetIOError(f"could not read dataset {path}: {exc}") from exc
    if header.get("format") != "egcsi-dataset" or header.get("version") != DATASET_VERSION:
        raise ContainerError(f"unsupported dataset header in {path}")
    cfg = SystemConfig.from_dict(header["cfg"])
    n = header["n_samples"]
    expected = n * cfg.n_tx * cfg.n_sc * 16
    if len(payload) != expected:
        raise ContainerError(f"payload is {len(payload)} bytes, expected {expected}")
    channels = np.frombuffer(payload, dtype="<c16").astype(complex).reshape(n, cfg.n_tx, cfg.n_sc)
    env = None if header.get("env") is None else EnvironmentSpec.from_dict(header["env"])
    return Dataset(channels, cfg, header["env_id"], header.get("seed"), env, header.get("source", "synthetic"))


def make_environments(count, seed, prefix="env", **overrides):
    """A family of random environments with distinct cluster layouts and LOS mixes."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    envs = []
    for i in range(count):
        n_cl = int(rng.integers(1, 5))
        params = dict(
            env_id=f"{prefix}{i:03d}",
            num_clusters=n_cl,
            cluster_aod_centers_rad=tuple(float(c) for c in rng.uniform(-1.1, 1.1, n_cl)),
            cluster_aod_spread_rad=float(rng.uniform(0.02, 0.15)),
            rms_delay_spread_s=float(rng.uniform(50e-9, 400e-9)),
            los_probability=float(rng.uniform(0.0, 1.0)),
            paths_per_cluster_range=(1, int(rng.integers(2, 7))),
            power_decay_per_cluster_db=float(rng.uniform(1.0, 6.0)),
            rng_seed=int(rng.integers(0, 2**63)),
        )
        params.update(overrides)
        envs.append(EnvironmentSpec(**params))
    return envs

