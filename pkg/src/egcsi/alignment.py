"""Fine-grained alignment of decoupled path components and its exact inverse.

A component is taken to the spatial-frequency domain, its oversampled
angular and delay peaks are found by matched filtering against unnormalised
oversampled DFT codewords, a unit-modulus phase mask moves that peak to
angular-delay bin (0, 0), and the quantised peak phase is removed. The
decoder undoes the mask with the transmitted indices, so recovery is exact
whenever the codec is lossless.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import bits as _bits
from .channel import SystemConfig
from .transforms import to_angular_delay, to_spatial_frequency


@dataclass(frozen=True)
class CodebookConfig:
    oversample_angular: int = 2
    oversample_delay: int = 2
    phase_bits: int = 2

    def __post_init__(self):
        if self.oversample_angular < 1 or self.oversample_delay < 1 or self.phase_bits < 1:
            raise ValueError("oversampling factors and phase_bits must be >= 1")

    def to_dict(self):
        return {"oversample_angular": self.oversample_angular,
                "oversample_delay": self.oversample_delay,
                "phase_bits": self.phase_bits}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def angular_codebook_size(cfg: SystemConfig, cb: CodebookConfig):
    # a UPA oversamples both of its axes
    if cfg.upa_shape is None:
        return cb.oversample_angular * cfg.n_tx
    return cb.oversample_angular ** 2 * cfg.n_tx


def delay_codebook_size(cfg: SystemConfig, cb: CodebookConfig):
    return cb.oversample_delay * cfg.n_sc


def _oversampled_dft(n, size):
    """Columns w_k[t] = exp(j 2 pi k t / size), t < n, k < size."""
    return np.exp(2j * np.pi * np.outer(np.arange(n), np.arange(size)) / size)


@functools.lru_cache(maxsize=None)
def angular_codebook(cfg: SystemConfig, cb: CodebookConfig):
    """N_T x (codebook size) matrix whose columns are the angular codewords."""
    if cfg.upa_shape is None:
        W = _oversampled_dft(cfg.n_tx, angular_codebook_size(cfg, cb))
    else:
        n_h, n_v = cfg.upa_shape
        o = cb.oversample_angular
        # index n = n_h_idx * (o n_v) + n_v_idx
        W = np.kron(_oversampled_dft(n_h, o * n_h), _oversampled_dft(n_v, o * n_v))
    W.setflags(write=False)
    return W


@functools.lru_cache(maxsize=None)
def delay_codebook(cfg: SystemConfig, cb: CodebookConfig):
    W = _oversampled_dft(cfg.n_sc, delay_codebook_size(cfg, cb))
    W.setflags(write=False)
    return W


def angular_codeword(n, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    size = angular_codebook_size(cfg, cb)
    if not 0 <= n < size:
        raise IndexError(f"angular codeword index {n} outside [0, {size})")
    return angular_codebook(cfg, cb)[:, n].copy()


def delay_codeword(m, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    size = delay_codebook_size(cfg, cb)
    if not 0 <= m < size:
        raise IndexError(f"delay codeword index {m} outside [0, {size})")
    return delay_codebook(cfg, cb)[:, m].copy()


def metadata_bits(cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """q_m = Q_p + ceil(log2(angular size * delay size))."""
    return cb.phase_bits + _bits.bits_needed(angular_codebook_size(cfg, cb) * delay_codebook_size(cfg, cb))


def metadata_field_widths(cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """Widths of the (n*, m*, beta) fields.

    Raises ValueError when the per-field widths do not add up to
    ``metadata_bits`` (only possible for non-power-of-two codebook sizes).
    """
    widths = (_bits.bits_needed(angular_codebook_size(cfg, cb)),
              _bits.bits_needed(delay_codebook_size(cfg, cb)), cb.phase_bits)
    if sum(widths) != metadata_bits(cfg, cb):
        raise ValueError(f"per-field metadata widths {widths} exceed q_m = {metadata_bits(cfg, cb)}")
    return widths


def pack_metadata(n_star, m_star, beta_index, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """(K,) index arrays -> (K, q_m) bit rows, fields MSB first."""
    wa, wd, wp = metadata_field_widths(cfg, cb)
    K = len(n_star)
    return np.concatenate([_bits.uint_to_bits(n_star, wa).reshape(K, wa),
                           _bits.uint_to_bits(m_star, wd).reshape(K, wd),
                           _bits.uint_to_bits(beta_index, wp).reshape(K, wp)], axis=1)


@dataclass(frozen=True)
class AlignmentMetadata:
    n_star: int
    m_star: int
    beta_index: int

    def validate(self, cfg: SystemConfig, cb: CodebookConfig):
        if not 0 <= self.n_star < angular_codebook_size(cfg, cb):
            raise ValueError(f"n_star {self.n_star} out of range")
        if not 0 <= self.m_star < delay_codebook_size(cfg, cb):
            raise ValueError(f"m_star {self.m_star} out of range")
        if not 0 <= self.beta_index < 2 ** cb.phase_bits:
            raise ValueError(f"beta_index {self.beta_index} out of range")

    def beta(self, cb: CodebookConfig):
        return phase_level(self.beta_index, cb.phase_bits)

    def to_bits(self, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
        """n* then m* then beta_index, each in its own MSB-first field."""
        self.validate(cfg, cb)
        return pack_metadata([self.n_star], [self.m_star], [self.beta_index], cfg, cb)[0]

    @classmethod
    def from_bits(cls, bits, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
        wa, wd, wp = metadata_field_widths(cfg, cb)
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.size != wa + wd + wp:
            raise ValueError(f"metadata needs {wa + wd + wp} bits, got {bits.size}")
        n = int(_bits.bits_to_uint(bits[:wa], wa)[0]) if wa else 0
        m = int(_bits.bits_to_uint(bits[wa:wa + wd], wd)[0]) if wd else 0
        k = int(_bits.bits_to_uint(bits[wa + wd:], wp)[0])
        meta = cls(n, m, k)
        meta.validate(cfg, cb)
        return meta


@dataclass(frozen=True)
class AlignedComponent:
    entries: np.ndarray  # N_T x N_c, angular-delay domain
    metadata: AlignmentMetadata
    peak_value: complex = 0j


def phase_level(index, q_p):
    return -math.pi + 2.0 * math.pi * index / 2 ** q_p


def quantize_phase(angle, q_p):
    """Nearest of the levels -pi + 2 pi k / 2^q_p by circular distance.

    Returns (level, k).
    """
    if q_p < 1:
        raise ValueError("q_p must be >= 1")
    n = 2 ** q_p
    k = math.floor((angle + math.pi) / (2.0 * math.pi) * n + 0.5) % n
    return phase_level(k, q_p), int(k)


def _quantize_phase_many(angles, q_p):
    n = 2 ** q_p
    k = np.floor((np.asarray(angles) + np.pi) / (2.0 * np.pi) * n + 0.5).astype(np.int64) % n
    return -np.pi + 2.0 * np.pi * k / n, k


def scan_peaks(p_sf, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """(n*, m*) maximising ||w_n^H P||^2 and ||P w_m||^2; lowest index wins ties."""
    p_sf = np.asarray(p_sf)
    if not np.vdot(p_sf, p_sf).real > 0:
        raise ValueError("cannot scan a zero component")
    n_star, m_star = _scan_many(p_sf[None], cfg, cb)
    return int(n_star[0]), int(m_star[0])


def _scan_many(P, cfg, cb):
    Wa = angular_codebook(cfg, cb)
    Wd = delay_codebook(cfg, cb)
    ang = np.abs(Wa.conj().T @ P) ** 2  # (B, A, N_c)
    dly = np.abs(P @ Wd) ** 2  # (B, N_T, D)
    return np.argmax(ang.sum(axis=2), axis=1), np.argmax(dly.sum(axis=1), axis=1)


def phase_mask(n_star, m_star, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """S = conj(w_n*) (x) w_m*^T, an N_T x N_c unit-modulus matrix."""
    return np.outer(angular_codebook(cfg, cb)[:, n_star].conj(), delay_codebook(cfg, cb)[:, m_star])


def _masks(n_star, m_star, cfg, cb):
    Wa = angular_codebook(cfg, cb)
    Wd = delay_codebook(cfg, cb)
    return Wa[:, n_star].conj().T[:, :, None] * Wd[:, m_star].T[:, None, :]


def align_many(p_ad, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """Align a stack (B, N_T, N_c) of angular-delay components.

    Returns (aligned entries, n_star, m_star, beta_index, peak values).
    """
    p_ad = np.asarray(p_ad)
    energy = np.einsum("bij,bij->b", p_ad.conj(), p_ad).real
    if np.any(~(energy > 0)):
        raise ValueError("cannot align a zero component")
    P = to_spatial_frequency(p_ad, cfg)
    n_star, m_star = _scan_many(P, cfg, cb)
    S = _masks(n_star, m_star, cfg, cb)
    masked = S * P
    peak = masked.sum(axis=(1, 2))
    beta, beta_idx = _quantize_phase_many(np.angle(peak), cb.phase_bits)
    aligned = to_angular_delay(np.exp(-1j * beta)[:, None, None] * masked, cfg)
    return aligned, n_star, m_star, beta_idx, peak


def align(component, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()) -> AlignedComponent:
    """Align one component, given as a PathComponent or an angular-delay matrix."""
    mat = component.matrix if hasattr(component, "matrix") else np.asarray(component)
    aligned, n, m, k, peak = align_many(mat[None], cfg, cb)
    return AlignedComponent(aligned[0], AlignmentMetadata(int(n[0]), int(m[0]), int(k[0])), complex(peak[0]))


def recover_many(decoded, n_star, m_star, beta_index, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    """Spatial-frequency components conj(e^{-j beta} S) * (F_a^H X F_d)."""
    decoded = np.asarray(decoded)
    n_star, m_star, beta_index = (np.asarray(a, dtype=np.int64) for a in (n_star, m_star, beta_index))
    if (np.any((n_star < 0) | (n_star >= angular_codebook_size(cfg, cb)))
            or np.any((m_star < 0) | (m_star >= delay_codebook_size(cfg, cb)))
            or np.any((beta_index < 0) | (beta_index >= 2 ** cb.phase_bits))):
        raise ValueError("alignment metadata out of range")
    beta = -np.pi + 2.0 * np.pi * beta_index / 2 ** cb.phase_bits
    S = _masks(n_star, m_star, cfg, cb)
    return (np.exp(-1j * beta)[:, None, None] * S).conj() * to_spatial_frequency(decoded, cfg)


def recover(decoded_aligned, meta: AlignmentMetadata, cfg: SystemConfig, cb: CodebookConfig = CodebookConfig()):
    meta.validate(cfg, cb)
    return recover_many(np.asarray(decoded_aligned)[None], [meta.n_star], [meta.m_star],
                        [meta.beta_index], cfg, cb)[0]

