"""Compressor/decompressor pairs for angular-delay matrices.

Every codec maps an N_T x N_c complex matrix to a fixed-length bit string
and back. Matrices enter as real feature vectors: real parts row-major,
then imaginary parts row-major (length 2 N_T N_c).

Kinds:

* ``passthrough`` - raw float64 features, lossless (diagnostic only)
* ``topk``        - K largest-magnitude entries, index + quantised re/im
* ``linear_pca``  - projection on M learned principal directions,
                    per-coefficient uniform quantisation

New kinds are added with :func:`register_codec`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import bits as _bits
from .container import CODEC_MAGIC, ContainerError, atomic_write, pack_container, unpack_container

CODEC_VERSION = 1


class UntrainedCodecError(ValueError):
    pass


class BitstreamError(ValueError):
    pass


# -- feature layout ---------------------------------------------------------

def to_features(mats):
    mats = np.asarray(mats)
    lead = mats.shape[:-2]
    flat = mats.reshape(lead + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def from_features(x, n_tx, n_sc):
    x = np.asarray(x, dtype=float)
    d = n_tx * n_sc
    if x.shape[-1] != 2 * d:
        raise ValueError(f"feature length {x.shape[-1]} != {2 * d}")
    z = x[..., :d] + 1j * x[..., d:]
    return z.reshape(x.shape[:-1] + (n_tx, n_sc))


# -- uniform scalar quantiser -------------------------------------------------

def quantize_levels(x, lo, hi, bits):
    """Mid-rise level index in [0, 2^bits), clamping outside [lo, hi].

    A zero-width range (lo == hi) maps everything to level 0.
    """
    x, lo, hi = np.broadcast_arrays(np.asarray(x, float), np.asarray(lo, float), np.asarray(hi, float))
    n = 2 ** bits
    span = hi - lo
    if np.any(span < 0):
        raise ValueError("quantiser range needs lo <= hi")
    safe = np.where(span > 0, span, 1.0)
    k = np.floor((x - lo) / safe * n)
    k = np.where(span > 0, k, 0)
    return np.clip(k, 0, n - 1).astype(np.int64)


def dequantize_levels(k, lo, hi, bits):
    n = 2 ** bits
    k, lo, hi = np.broadcast_arrays(np.asarray(k), np.asarray(lo, float), np.asarray(hi, float))
    return lo + (k + 0.5) * (hi - lo) / n


def quantize_uniform(x, lo, hi, bits):
    """Pack the level indices of ``x`` into a bit string (``bits`` per element)."""
    return _bits.uint_to_bits(quantize_levels(x, lo, hi, bits).ravel(), bits)


def dequantize_uniform(bitstring, lo, hi, bits):
    k = _bits.bits_to_uint(bitstring, bits).astype(np.int64)
    return dequantize_levels(k, lo, hi, bits)


# -- codec spec ---------------------------------------------------------------

@dataclass
class CodecSpec:
    kind: str
    codeword_len: int
    element_bits: int
    n_tx: int
    n_sc: int
    trained_state: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.codeword_len < 1 or self.element_bits < 1:
            raise ValueError("codeword_len and element_bits must be >= 1")

    @property
    def feature_dim(self):
        return 2 * self.n_tx * self.n_sc

    @property
    def handler(self):
        return _KINDS[self.kind]

    @property
    def bits_per_component(self):
        """q_f: bit length of one encoded component."""
        return self.handler.n_bits(self)

    @property
    def lossless(self):
        return self.handler.lossless

    def require_trained(self):
        if self.handler.learned and self.trained_state is None:
            raise UntrainedCodecError(f"{self.kind} codec has not been trained")

    def to_bytes(self):
        return codec_bytes(self)

    def fingerprint(self):
        return hashlib.sha256(codec_bytes(self)).hexdigest()[:16]


@dataclass
class Codeword:
    values: np.ndarray  # the real codeword c before quantisation
    bits: np.ndarray  # uint8 0/1, length q_f


# -- kinds --------------------------------------------------------------------

class _Passthrough:
    learned = False
    lossless = True

    @staticmethod
    def train(X, spec):
        return None

    @staticmethod
    def n_bits(spec):
        return 64 * spec.feature_dim

    @staticmethod
    def encode(spec, X):
        return X.copy(), _bits.float64_to_bits(X).reshape(len(X), -1)

    @staticmethod
    def decode(spec, B):
        return _bits.bits_to_float64(B.ravel()).reshape(len(B), -1)


class _TopK:
    """K = codeword_len entries; each is an index plus re and im levels."""
    learned = True
    lossless = False

    @staticmethod
    def _select(Z, K):
        order = np.argsort(-np.abs(Z), axis=1, kind="stable")[:, :K]
        return np.sort(order, axis=1)

    @staticmethod
    def train(X, spec):
        d = spec.n_tx * spec.n_sc
        if spec.codeword_len > d:
            raise ValueError(f"topk K={spec.codeword_len} exceeds {d} entries")
        Z = X[:, :d] + 1j * X[:, d:]
        idx = _TopK._select(Z, spec.codeword_len)
        vals = np.take_along_axis(Z, idx, axis=1)
        return {
            "lo": np.array([vals.real.min(), vals.imag.min()]),
            "hi": np.array([vals.real.max(), vals.imag.max()]),
        }

    @staticmethod
    def n_bits(spec):
        return spec.codeword_len * (_bits.bits_needed(spec.n_tx * spec.n_sc) + 2 * spec.element_bits)

    @staticmethod
    def encode(spec, X):
        d = spec.n_tx * spec.n_sc
        K, q = spec.codeword_len, spec.element_bits
        st = spec.trained_state
        Z = X[:, :d] + 1j * X[:, d:]
        idx = _TopK._select(Z, K)
        vals = np.take_along_axis(Z, idx, axis=1)
        kr = quantize_levels(vals.real, st["lo"][0], st["hi"][0], q)
        ki = quantize_levels(vals.imag, st["lo"][1], st["hi"][1], q)
        w = _bits.bits_needed(d)
        n = len(X)
        rec = np.concatenate([
            _bits.uint_to_bits(idx.ravel(), w).reshape(n, K, w),
            _bits.uint_to_bits(kr.ravel(), q).reshape(n, K, q),
            _bits.uint_to_bits(ki.ravel(), q).reshape(n, K, q),
        ], axis=2)
        values = np.concatenate([idx, vals.real, vals.imag], axis=1).astype(float)
        return values, rec.reshape(n, -1)

    @staticmethod
    def decode(spec, B):
        d = spec.n_tx * spec.n_sc
        K, q = spec.codeword_len, spec.element_bits
        st = spec.trained_state
        w = _bits.bits_needed(d)
        n = len(B)
        recs = B.reshape(n, K, w + 2 * q)
        if w:
            idx = _bits.bits_to_uint(recs[:, :, :w].ravel(), w).astype(np.int64).reshape(n, K)
        else:
            idx = np.zeros((n, K), dtype=np.int64)
        kr = _bits.bits_to_uint(recs[:, :, w:w + q].ravel(), q).astype(np.int64).reshape(n, K)
        ki = _bits.bits_to_uint(recs[:, :, w + q:].ravel(), q).astype(np.int64).reshape(n, K)
        if np.any(idx >= d):
            raise BitstreamError("topk index out of range")
        Z = np.zeros((n, d), dtype=complex)
        np.put_along_axis(Z, idx, dequantize_levels(kr, st["lo"][0], st["hi"][0], q)
                          + 1j * dequantize_levels(ki, st["lo"][1], st["hi"][1], q), axis=1)
        return np.concatenate([Z.real, Z.imag], axis=1)


class _LinearPCA:
    learned = True
    lossless = False

    @staticmethod
    def train(X, spec):
        M, d = spec.codeword_len, X.shape[1]
        if M > d:
            raise ValueError(f"codeword_len {M} exceeds feature dimension {d}")
        mean = X.mean(axis=0)
        Xc = X - mean
        if Xc.shape[0] >= d:
            # covariance eigenvectors are much cheaper than an SVD of a tall X
            _, vecs = np.linalg.eigh(Xc.T @ Xc)
            basis = vecs[:, ::-1][:, :M].T.copy()
        else:
            _, _, Vt = np.linalg.svd(Xc, full_matrices=M > min(Xc.shape))
            basis = Vt[:M].copy()
        # deterministic sign: largest-magnitude entry of each direction positive
        lead = np.argmax(np.abs(basis), axis=1)
        basis *= np.sign(basis[np.arange(M), lead])[:, None]
        coef = Xc @ basis.T
        return {"mean": mean, "basis": basis, "lo": coef.min(axis=0), "hi": coef.max(axis=0)}

    @staticmethod
    def n_bits(spec):
        return spec.codeword_len * spec.element_bits

    @staticmethod
    def project(spec, X):
        st = spec.trained_state
        return (X - st["mean"]) @ st["basis"].T

    @staticmethod
    def encode(spec, X):
        st = spec.trained_state
        coef = _LinearPCA.project(spec, X)
        k = quantize_levels(coef, st["lo"], st["hi"], spec.element_bits)
        return coef, _bits.uint_to_bits(k.ravel(), spec.element_bits).reshape(len(X), -1)

    @staticmethod
    def decode(spec, B):
        st = spec.trained_state
        q = spec.element_bits
        k = _bits.bits_to_uint(B.ravel(), q).astype(np.int64).reshape(len(B), spec.codeword_len)
        return st["mean"] + dequantize_levels(k, st["lo"], st["hi"], q) @ st["basis"]


_KINDS = {"passthrough": _Passthrough, "topk": _TopK, "linear_pca": _LinearPCA}


def register_codec(kind, handler):
    """Add a codec kind. ``handler`` needs ``learned``, ``lossless`` and the
    static methods ``train``, ``n_bits``, ``encode`` and ``decode`` used above."""
    _KINDS[kind] = handler


def codec_kinds():
    return tuple(_KINDS)


# -- public operations -------------------------------------------------------

def _as_features(data, n_tx=None, n_sc=None):
    data = np.asarray(data)
    if np.iscomplexobj(data):
        if data.ndim == 2:
            data = data[None]
        return to_features(data), data.shape[-2], data.shape[-1]
    if data.ndim == 1:
        data = data[None]
    return data.astype(float), n_tx, n_sc


def train(kind, training_set, M, Q_f=6, n_tx=None, n_sc=None) -> CodecSpec:
    """Fit a codec to a training set of complex matrices (B, N_T, N_c) or
    real feature vectors (B, 2 N_T N_c); the latter need ``n_tx``/``n_sc``."""
    X, n_tx, n_sc = _as_features(training_set, n_tx, n_sc)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if n_tx is None or n_sc is None:
        raise ValueError("n_tx and n_sc are required for real-valued training data")
    if X.shape[1] != 2 * n_tx * n_sc:
        raise ValueError("feature dimension does not match n_tx, n_sc")
    spec = CodecSpec(kind, int(M), int(Q_f), int(n_tx), int(n_sc))
    spec.trained_state = spec.handler.train(X, spec)
    return spec


def encode_many(spec: CodecSpec, mats):
    """Encode a stack (B, N_T, N_c); returns (codeword values, bits of shape (B, q_f))."""
    spec.require_trained()
    mats = np.asarray(mats)
    if mats.shape[-2:] != (spec.n_tx, spec.n_sc):
        raise ValueError("matrix shape does not match the codec")
    return spec.handler.encode(spec, to_features(mats.reshape((-1, spec.n_tx, spec.n_sc))))


def decode_many(spec: CodecSpec, bits):
    spec.require_trained()
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 2 or bits.shape[1] != spec.bits_per_component:
        raise BitstreamError(f"expected rows of {spec.bits_per_component} bits, got shape {bits.shape}")
    return from_features(spec.handler.decode(spec, bits), spec.n_tx, spec.n_sc)


def encode(spec: CodecSpec, p_aln) -> Codeword:
    mat = p_aln.entries if hasattr(p_aln, "entries") else np.asarray(p_aln)
    values, bits = encode_many(spec, mat[None])
    return Codeword(values[0], bits[0])


def decode(spec: CodecSpec, codeword):
    bits = codeword.bits if isinstance(codeword, Codeword) else np.asarray(codeword, dtype=np.uint8)
    if bits.ndim != 1 or bits.size != spec.bits_per_component:
        raise BitstreamError(f"codeword has {bits.size} bits, codec expects {spec.bits_per_component}")
    return decode_many(spec, bits[None])[0]


def reconstruct_unquantized(spec: CodecSpec, mats):
    """linear_pca reconstruction without the quantiser (for diagnostics)."""
    if spec.kind != "linear_pca":
        raise ValueError("only defined for linear_pca")
    spec.require_trained()
    X = to_features(np.asarray(mats))
    st = spec.trained_state
    return from_features(st["mean"] + _LinearPCA.project(spec, X) @ st["basis"], spec.n_tx, spec.n_sc)


# -- persistence --------------------------------------------------------------

def codec_bytes(spec: CodecSpec):
    state = spec.trained_state or {}
    names = sorted(state)
    header = {
        "format": "egcsi-codec",
        "version": CODEC_VERSION,
        "kind": spec.kind,
        "M": spec.codeword_len,
        "Q_f": spec.element_bits,
        "n_tx": spec.n_tx,
        "n_sc": spec.n_sc,
        "trained": spec.trained_state is not None,
        "arrays": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    body = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    return pack_container(CODEC_MAGIC, header, body)


def codec_from_bytes(blob) -> CodecSpec:
    _, header, body = unpack_container(blob, CODEC_MAGIC)
    if header.get("format") != "egcsi-codec" or header.get("version") != CODEC_VERSION:
        raise ContainerError("unsupported codec header")
    state, off = {}, 0
    for a in header["arrays"]:
        n = int(np.prod(a["shape"], dtype=np.int64))
        chunk = body[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise ContainerError("codec body truncated")
        state[a["name"]] = np.frombuffer(chunk, dtype="<f8").astype(float).reshape(a["shape"])
        off += 8 * n
    if off != len(body):
        raise ContainerError("trailing bytes in codec body")
    spec = CodecSpec(header["kind"], header["M"], header["Q_f"], header["n_tx"], header["n_sc"])
    spec.trained_state = state if header["trained"] else None
    return spec


def save_codec(path, spec: CodecSpec):
    atomic_write(path, codec_bytes(spec))


def load_codec(path) -> CodecSpec:
    with open(path, "rb") as fh:
        return codec_from_bytes(fh.read())
