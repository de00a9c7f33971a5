"""Generalisation experiments: EG pipeline versus a vanilla codec on raw H_ad.

Both sides use the same linear codec family. The EG codec is trained on the
pooled aligned components of every training channel; the vanilla codec is
trained on raw angular-delay matrices with its codeword length chosen so
that M_v * Q_f is the nearest multiple of Q_f to the EG mean bits measured
on the training set. Everything is a pure function of (config, seed).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec as _codec
from .alignment import CodebookConfig, metadata_bits
from .channel import EnvironmentSpec, SystemConfig, generate_dataset, make_environments
from .container import atomic_write
from .pipeline import AlignedSet, decouple_and_align, eg_decode_batch, messages_from_aligned, nmse_ratio, to_db
from .transforms import to_angular_delay, to_spatial_frequency

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
SCHEMES = ("eg", "vanilla", "topk-eg", "passthrough-bound")
_EVAL_CHUNK = 256  # channels per evaluation batch; bounds bitstream memory


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class CodecPoint:
    kind: str = "linear_pca"
    M: int = 8
    Q_f: int = 6

    def to_list(self):
        return [self.kind, self.M, self.Q_f]

    @property
    def label(self):
        return f"{self.kind}:{self.M}:{self.Q_f}"


def _env_list(value, key):
    """Explicit list of environment dicts, or {"random": {count, seed, prefix, overrides}}."""
    if isinstance(value, dict) and "random" in value:
        r = dict(value["random"])
        try:
            return make_environments(int(r["count"]), int(r["seed"]), r.get("prefix", key.split("_")[0]),
                                     **r.get("overrides", {}))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{key}: bad random environment block ({exc})") from exc
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list of environments or a random block")
    try:
        return [EnvironmentSpec.from_dict(d) for d in value]
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


@dataclass
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    eta: float = 0.99
    r_max: int | None = 16
    train_envs: list = field(default_factory=list)
    test_envs: list = field(default_factory=list)
    samples_per_env: int = 9000
    test_samples_per_env: int = 1000
    codec_grid: list = field(default_factory=lambda: [CodecPoint()])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "results"
    include_topk: bool = False
    include_passthrough: bool = True
    name: str = "experiment"

    def validate(self):
        if not self.train_envs:
            raise ConfigError("need at least one training environment")
        if not self.test_envs:
            raise ConfigError("need at least one test environment")
        train_ids = [e.env_id for e in self.train_envs]
        test_ids = [e.env_id for e in self.test_envs]
        if len(set(train_ids)) != len(train_ids) or len(set(test_ids)) != len(test_ids):
            raise ConfigError("duplicate env_id")
        overlap = set(train_ids) & set(test_ids)
        if overlap:
            raise ConfigError(f"train and test environments share env_id(s) {sorted(overlap)}")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError("eta must lie in (0, 1]")
        if self.samples_per_env < 1 or self.test_samples_per_env < 1:
            raise ConfigError("sample counts must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.codec_grid:
            raise ConfigError("codec_grid is empty")
        for p in self.codec_grid:
            if p.kind not in _codec.codec_kinds():
                raise ConfigError(f"unknown codec kind {p.kind!r}")
        return self

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "name": self.name,
            "system": self.system.to_dict(),
            "codebook": self.codebook.to_dict(),
            "eta": self.eta,
            "r_max": self.r_max,
            "train_envs": [e.to_dict() for e in self.train_envs],
            "test_envs": [e.to_dict() for e in self.test_envs],
            "samples_per_env": self.samples_per_env,
            "test_samples_per_env": self.test_samples_per_env,
            "codec_grid": [p.to_list() for p in self.codec_grid],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "include_topk": self.include_topk,
            "include_passthrough": self.include_passthrough,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "system" in d:
                s = dict(d["system"])
                if s.get("upa_shape") is not None:
                    s["upa_shape"] = tuple(s["upa_shape"])
                d["system"] = SystemConfig.from_dict(s)
            if "codebook" in d:
                d["codebook"] = CodebookConfig.from_dict(d["codebook"])
            for key in ("train_envs", "test_envs"):
                if key in d:
                    d[key] = _env_list(d[key], key)
            if "codec_grid" in d:
                d["codec_grid"] = [CodecPoint(str(k), int(m), int(q)) for k, m, q in d["codec_grid"]]
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


def load_config(path, **overrides):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(raw, dict):
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def default_config(n_train=1, n_test=10, samples=1000, test_samples=500, seeds=(0, 1, 2)):
    """Desk-scale defaults with randomly drawn, disjoint environment families."""
    return ExperimentConfig(
        train_envs=make_environments(n_train, 1001, prefix="train"),
        test_envs=make_environments(n_test, 2002, prefix="test"),
        samples_per_env=samples,
        test_samples_per_env=test_samples,
        seeds=list(seeds),
    ).validate()


# -- data ---------------------------------------------------------------------

def data_seed(run_seed, role):
    """Dataset seed for a run seed and a role (0 train, 1 test)."""
    return int(np.random.SeedSequence([int(run_seed), int(role)]).generate_state(1, np.uint64)[0])


@dataclass
class _Split:
    channels: np.ndarray
    aset: AlignedSet
    offsets: np.ndarray  # component offset of every sample, plus the end


def _split(channels, aset):
    return _Split(channels, aset, np.concatenate([[0], np.cumsum(aset.r_hat)]))


class DataCache:
    """Generated channels and their aligned components, keyed by (env, seed, n)."""

    def __init__(self):
        self._store = {}

    def get(self, env, seed, n, cfg: ExperimentConfig):
        key = (env.env_id, env.rng_seed, seed, n, cfg.system, cfg.codebook, cfg.eta, cfg.r_max)
        if key not in self._store:
            ds = generate_dataset(env, n, cfg.system, seed=seed)
            aset = decouple_and_align(ds.channels, cfg.eta, cfg.codebook, cfg.system, cfg.r_max)
            self._store[key] = _split(ds.channels, aset)
        return self._store[key]


def _slice(sp: _Split, lo, hi):
    a, c0, c1 = sp.aset, sp.offsets[lo], sp.offsets[hi]
    sub = AlignedSet(a.aligned[c0:c1], a.n_star[c0:c1], a.m_star[c0:c1], a.beta_index[c0:c1],
                     a.owner[c0:c1] - lo, a.r_hat[lo:hi], a.sigma[c0:c1], a.capped[lo:hi])
    return sp.channels[lo:hi], sub


# -- evaluation -----------------------------------------------------------------

def _eval_eg(sp: _Split, spec, cfg: ExperimentConfig):
    """Per-sample NMSE ratios and bit counts through the serialised records."""
    ratios, bits = [], []
    for lo in range(0, len(sp.channels), _EVAL_CHUNK):
        H, aset = _slice(sp, lo, min(lo + _EVAL_CHUNK, len(sp.channels)))
        msgs = messages_from_aligned(aset, spec, cfg.system, cfg.codebook)
        H_hat = eg_decode_batch(msgs, cfg.codebook, spec, cfg.system)
        ratios.append(nmse_ratio(H, H_hat))
        bits.append([m.total_bits for m in msgs])
    return np.concatenate(ratios), np.concatenate(bits)


def _eval_vanilla(channels, spec, cfg: ExperimentConfig):
    ratios = []
    for lo in range(0, len(channels), _EVAL_CHUNK):
        H = channels[lo:lo + _EVAL_CHUNK]
        _, b = _codec.encode_many(spec, to_angular_delay(H, cfg.system))
        H_hat = to_spatial_frequency(_codec.decode_many(spec, b), cfg.system)
        ratios.append(nmse_ratio(H, H_hat))
    return np.concatenate(ratios)


@dataclass
class ResultRow:
    scheme: str
    seed: object  # run seed, or "mean" for a multi-seed summary row
    n_train_envs: int
    point: str  # EG codec point the row belongs to (the vanilla row is matched to it)
    codec: str
    M: int
    Q_f: int
    mean_bits: float
    target_bits: float = float("nan")
    bit_gap: float = float("nan")
    mean_r_hat: float = float("nan")
    nmse_db_mean: float = float("nan")
    nmse_db_std: float = float("nan")
    nmse_db_per_env: dict = field(default_factory=dict)
    status: str = "ok"

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["nmse_db_per_env"] = dict(sorted(self.nmse_db_per_env.items()))
        return d


def _summarise(per_env_ratios):
    """Per-env NMSE in dB and the dB of the mean ratio across envs."""
    per_env = {e: float(to_db(np.mean(r))) for e, r in per_env_ratios.items()}
    overall = float(to_db(np.mean([np.mean(r) for r in per_env_ratios.values()])))
    return overall, per_env


def _matched_length(target_bits, q_f, feature_dim):
    m_v = int(math.floor(target_bits / q_f + 0.5))
    if not 1 <= m_v <= feature_dim:
        return None
    return m_v


def _run_seed(cfg: ExperimentConfig, seed, train_envs, cache: DataCache):
    rows = []
    sys_cfg = cfg.system
    q_m = metadata_bits(sys_cfg, cfg.codebook)
    feature_dim = 2 * sys_cfg.n_tx * sys_cfg.n_sc
    train = [cache.get(e, data_seed(seed, 0), cfg.samples_per_env, cfg) for e in train_envs]
    test = {e.env_id: cache.get(e, data_seed(seed, 1), cfg.test_samples_per_env, cfg) for e in cfg.test_envs}
    pooled = np.concatenate([sp.aset.aligned for sp in train])
    train_r = np.concatenate([sp.aset.r_hat for sp in train])
    raw_train = to_angular_delay(np.concatenate([sp.channels for sp in train]), sys_cfg)
    n_env = len(train_envs)

    def eg_like(scheme, spec, point, label, target=float("nan")):
        per_env, bits, r = {}, [], []
        for env_id, sp in test.items():
            ratios, b = _eval_eg(sp, spec, cfg)
            per_env[env_id] = ratios
            bits.append(b)
            r.append(sp.aset.r_hat)
        overall, per_db = _summarise(per_env)
        return ResultRow(scheme, seed, n_env, label, point.kind, point.M, point.Q_f,
                         float(np.mean(np.concatenate(bits))), target, float("nan"),
                         float(np.mean(np.concatenate(r))), overall, float("nan"), per_db)

    for point in cfg.codec_grid:
        try:
            spec = _codec.train(point.kind, pooled, point.M, point.Q_f)
        except ValueError as exc:
            rows.append(ResultRow("eg", seed, n_env, point.label, point.kind, point.M, point.Q_f, float("nan"),
                                  status=f"error: {exc}"))
            continue
        train_bits = float(np.mean(train_r)) * (q_m + spec.bits_per_component)
        rows.append(eg_like("eg", spec, point, point.label, train_bits))

        m_v = _matched_length(train_bits, point.Q_f, feature_dim)
        vpoint = CodecPoint("linear_pca", m_v or 0, point.Q_f)
        if m_v is None:
            msg = f"infeasible: no vanilla length within one element of {train_bits:.1f} bits"
            log.warning("seed %s, %s: %s", seed, point, msg)
            rows.append(ResultRow("vanilla", seed, n_env, point.label, "linear_pca", 0, point.Q_f, float("nan"),
                                  train_bits, status=msg))
            continue
        vspec = _codec.train("linear_pca", raw_train, m_v, point.Q_f)
        gap = m_v * point.Q_f - train_bits
        log.info("seed %s, %s: EG %.2f bits (train), vanilla M_v=%d -> %d bits, gap %.2f",
                 seed, point.to_list(), train_bits, m_v, m_v * point.Q_f, gap)
        per_env = {env_id: _eval_vanilla(sp.channels, vspec, cfg) for env_id, sp in test.items()}
        overall, per_db = _summarise(per_env)
        rows.append(ResultRow("vanilla", seed, n_env, point.label, "linear_pca", m_v, point.Q_f,
                              float(m_v * point.Q_f), train_bits, gap, float("nan"), overall,
                              float("nan"), per_db))
        if cfg.include_topk:
            tspec = _codec.train("topk", pooled, point.M, point.Q_f)
            rows.append(eg_like("topk-eg", tspec, CodecPoint("topk", point.M, point.Q_f), point.label))

    if cfg.include_passthrough:
        pspec = _codec.train("passthrough", pooled[:1], 1)
        rows.append(eg_like("passthrough-bound", pspec, CodecPoint("passthrough", 1, 64), "passthrough"))
    return rows


def _aggregate(rows):
    """One summary row per (scheme, n_train_envs, codec point) over seeds.

    M is the seed mean, rounded, since the matched vanilla length can vary.
    """
    groups = {}
    for r in rows:
        if r.status == "ok":
            groups.setdefault((r.scheme, r.n_train_envs, r.point), []).append(r)
    out = []
    for (scheme, n_env, point), grp in groups.items():
        vals = np.array([r.nmse_db_mean for r in grp])
        envs = sorted(grp[0].nmse_db_per_env)
        out.append(ResultRow(
            scheme, "mean", n_env, point, grp[0].codec, int(round(np.mean([r.M for r in grp]))), grp[0].Q_f,
            float(np.mean([r.mean_bits for r in grp])),
            float(np.mean([r.target_bits for r in grp])),
            float(np.mean([r.bit_gap for r in grp])),
            float(np.mean([r.mean_r_hat for r in grp])),
            float(np.mean(vals)),
            float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            {e: float(np.mean([r.nmse_db_per_env[e] for r in grp])) for e in envs},
        ))
    return out


@dataclass
class ResultTable:
    rows: list
    summary: list
    config: ExperimentConfig

    def all_rows(self):
        return self.rows + self.summary

    def select(self, scheme, seed=None, **kw):
        out = [r for r in self.rows + self.summary if r.scheme == scheme and (seed is None or r.seed == seed)]
        for k, v in kw.items():
            out = [r for r in out if getattr(r, k) == v]
        return out


def run_experiment(cfg: ExperimentConfig, cache: DataCache | None = None, train_envs=None) -> ResultTable:
    cfg.validate()
    cache = cache or DataCache()
    train_envs = cfg.train_envs if train_envs is None else train_envs
    rows = []
    for seed in cfg.seeds:
        rows += _run_seed(cfg, seed, train_envs, cache)
    return ResultTable(rows, _aggregate(rows), cfg)


def sweep_bits(cfg: ExperimentConfig, bit_grid, cache: DataCache | None = None) -> ResultTable:
    """One run per EG codeword length in ``bit_grid`` (ints, or (kind, M, Q_f) triples)."""
    if not bit_grid:
        raise ValueError("bit grid is empty")
    base = cfg.codec_grid[0]
    points = [CodecPoint(base.kind, int(p), base.Q_f) if np.isscalar(p) else CodecPoint(*p) for p in bit_grid]
    points.sort(key=lambda p: (p.M * p.Q_f, p.M))
    return run_experiment(replace(cfg, codec_grid=points), cache)


def sweep_train_envs(cfg: ExperimentConfig, env_counts, cache: DataCache | None = None) -> ResultTable:
    """Runs with the first k training environments for each k in ``env_counts``."""
    if not env_counts:
        raise ValueError("env_counts is empty")
    cache = cache or DataCache()
    rows, summary = [], []
    for k in sorted(set(int(c) for c in env_counts)):
        if not 1 <= k <= len(cfg.train_envs):
            raise ConfigError(f"env count {k} outside [1, {len(cfg.train_envs)}]")
        t = run_experiment(cfg, cache, cfg.train_envs[:k])
        rows += t.rows
        summary += t.summary
    return ResultTable(rows, summary, cfg)


# -- output ------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def table_csv(table: ResultTable):
    env_ids = [e.env_id for e in table.config.test_envs]
    cols = ["scheme", "seed", "n_train_envs", "point", "codec", "M", "Q_f", "mean_bits", "target_bits", "bit_gap",
            "mean_r_hat", "nmse_db_mean", "nmse_db_std", "status"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols + [f"nmse_db:{e}" for e in env_ids])
    for r in table.all_rows():
        w.writerow([_fmt(getattr(r, c)) for c in cols]
                   + [_fmt(r.nmse_db_per_env.get(e, float("nan"))) for e in env_ids])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    return v


def table_json(table: ResultTable):
    # where the files land is not part of the experiment
    config = {k: v for k, v in table.config.to_dict().items() if k != "output_dir"}
    doc = {
        "schema": "egcsi-results/1",
        "config": config,
        "rows": [{k: _json_safe(v) for k, v in r.to_dict().items()} for r in table.rows],
        "summary": [{k: _json_safe(v) for k, v in r.to_dict().items()} for r in table.summary],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_table(table: ResultTable, stem):
    """Write ``<stem>.csv`` and ``<stem>.json``; returns the two paths."""
    paths = (f"{stem}.csv", f"{stem}.json")
    atomic_write(paths[0], table_csv(table).encode("utf-8"))
    atomic_write(paths[1], table_json(table).encode("utf-8"))
    return paths


def format_summary(table: ResultTable):
    lines = []
    for r in table.summary:
        lines.append(f"{r.scheme:>18}  envs={r.n_train_envs:<3d} {r.codec}(M={r.M}, Q_f={r.Q_f})  "
                     f"bits={r.mean_bits:9.2f}  NMSE={r.nmse_db_mean:8.3f} dB  (std {r.nmse_db_std:.3f})")
    bad = [r for r in table.rows if r.status != "ok"]
    for r in bad:
        lines.append(f"{r.scheme:>18}  seed={r.seed}: {r.status}")
    return "\n".join(lines)
