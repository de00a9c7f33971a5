"""Unitary spatial-frequency <-> angular-delay transforms.

Forward DFT convention: F[m, t] = exp(-j 2 pi m t / N) / sqrt(N), and

    H_ad = F_a @ H @ F_d^H        H = F_a^H @ H_ad @ F_d

With this sign a ULA path at sin(phi) > 0 peaks at angular bin
N_T sin(phi) / 2 and a path with delay tau peaks at delay bin N_c df tau.
For a UPA, F_a is the Kronecker product of the horizontal and vertical DFTs.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .channel import PathParams, SystemConfig


@functools.lru_cache(maxsize=None)
def dft_matrix(n):
    idx = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)
    F.setflags(write=False)
    return F


@functools.lru_cache(maxsize=None)
def angular_dft(cfg: SystemConfig):
    if cfg.upa_shape is None:
        return dft_matrix(cfg.n_tx)
    F = np.kron(dft_matrix(cfg.upa_shape[0]), dft_matrix(cfg.upa_shape[1]))
    F.setflags(write=False)
    return F


def _check_shape(x, cfg):
    if x.shape[-2:] != (cfg.n_tx, cfg.n_sc):
        raise ValueError(f"expected trailing shape ({cfg.n_tx}, {cfg.n_sc}), got {x.shape[-2:]}")


def _cfg_for(x, cfg):
    if cfg is None:
        if x.ndim < 2:
            raise ValueError("need at least a 2-D matrix")
        return SystemConfig(n_tx=x.shape[-2], n_sc=x.shape[-1])
    return cfg


def to_angular_delay(h, cfg: SystemConfig | None = None):
    """Accepts a single matrix or a stack (..., N_T, N_c)."""
    h = np.asarray(h)
    cfg = _cfg_for(h, cfg)
    _check_shape(h, cfg)
    return angular_dft(cfg) @ h @ dft_matrix(cfg.n_sc).conj().T


def to_spatial_frequency(ht, cfg: SystemConfig | None = None):
    ht = np.asarray(ht)
    cfg = _cfg_for(ht, cfg)
    _check_shape(ht, cfg)
    return angular_dft(cfg).conj().T @ ht @ dft_matrix(cfg.n_sc)


@dataclass(frozen=True)
class LeakageIndices:
    i_a: int  # wrapped into [0, N_T)
    i_d: int
    r_a: float  # in [-0.5, 0.5)
    r_d: float

    @property
    def peak(self):
        return self.i_a, self.i_d


def _round_half_up(x):
    return math.floor(x + 0.5)


def leakage_indices(params: PathParams, cfg: SystemConfig) -> LeakageIndices:
    if cfg.upa_shape is not None:
        raise ValueError("leakage indices are defined for a ULA only")
    x_a = cfg.n_tx * math.sin(params.aod_rad) / 2.0
    x_d = cfg.n_sc * cfg.subcarrier_spacing_hz * params.delay_s
    i_a, i_d = _round_half_up(x_a), _round_half_up(x_d)
    return LeakageIndices(i_a % cfg.n_tx, i_d % cfg.n_sc, x_a - i_a, x_d - i_d)


def dirichlet(x, n):
    """D_N(x) = sin(pi x) / sin(pi x / N), with its limit N (-1)^(k (N-1)) at x = k N."""
    x = np.asarray(x, dtype=float)
    k = np.round(x / n)
    singular = np.abs(x - k * n) < 1e-12
    den = np.sin(np.pi * x / n)
    safe = np.where(singular, 1.0, den)
    val = np.sin(np.pi * x) / safe
    limit = n * np.where((k * (n - 1)) % 2 == 0, 1.0, -1.0)
    return np.where(singular, limit, val)


def single_path_ad_matrix(params: PathParams, cfg: SystemConfig, n_paths=1):
    """Closed-form angular-delay response of one path of an ``n_paths``-path channel.

    The unitary DFTs contribute a 1/sqrt(N_T N_c) factor, and the phase
    theta_{m,n} below is the one implied by the DFT sign convention and the
    folded carrier phase of :func:`egcsi.channel.synthesize_channel`.
    """
    if cfg.upa_shape is not None:
        raise ValueError("closed-form leakage is defined for a ULA only")
    n_t, n_c = cfg.n_tx, cfg.n_sc
    x_a = n_t * math.sin(params.aod_rad) / 2.0
    x_d = n_c * cfg.subcarrier_spacing_hz * params.delay_s
    da = (x_a - np.arange(n_t))[:, None]
    dd = (x_d - np.arange(n_c))[None, :]
    theta = np.pi * (n_t - 1) / n_t * da - np.pi * (n_c - 1) / n_c * dd
    mag = dirichlet(da, n_t) * dirichlet(dd, n_c)
    return params.gain / math.sqrt(n_paths) * np.exp(1j * theta) * mag / math.sqrt(n_t * n_c)


def single_path_ad_element(params: PathParams, m: int, n: int, cfg: SystemConfig, n_paths=1):
    if not (0 <= m < cfg.n_tx and 0 <= n < cfg.n_sc):
        raise IndexError("(m, n) outside the angular-delay grid")
    return complex(single_path_ad_matrix(params, cfg, n_paths)[m, n])
