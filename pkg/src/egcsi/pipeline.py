"""End-to-end feedback: channel -> path records -> bit-exact message -> channel.

Message framing: an 8-bit R_hat header, then R_hat fixed-length records of
q_m metadata bits followed by q_f codec bits, zero-padded to a whole byte.
Record lengths follow from the shared (out-of-band) configuration, and the
header and padding are not counted in ``total_bits``.
"""
from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import bits as _bits
from .alignment import (AlignmentMetadata, CodebookConfig, align_many, metadata_bits, pack_metadata,
                        recover_many)
from .channel import SystemConfig
from .codec import CodecSpec, decode_many, encode_many
from .container import FEEDBACK_MAGIC, atomic_write, pack_container, read_container
from .decoupling import ZeroChannelError, decouple_batch
from .transforms import to_angular_delay

HEADER_BITS = 8
NMSE_FLOOR_DB = -300.0


class MalformedMessageError(ValueError):
    pass


@dataclass
class FeedbackMessage:
    records: list  # [(metadata bits, codec bits)], uint8 arrays

    @property
    def r_hat(self):
        return len(self.records)

    @property
    def total_bits(self):
        """q = sum over records of (q_m + q_f); excludes header and padding."""
        return sum(m.size + c.size for m, c in self.records)

    def payload_bits(self):
        if not self.records:
            return np.zeros(0, dtype=np.uint8)
        return np.concatenate([np.concatenate([m, c]) for m, c in self.records]).astype(np.uint8)

    def to_bytes(self):
        if not 1 <= self.r_hat < 2 ** HEADER_BITS:
            raise MalformedMessageError(f"R_hat={self.r_hat} cannot be framed")
        return _bits.to_bytes(np.concatenate([_bits.uint_to_bits(self.r_hat, HEADER_BITS), self.payload_bits()]))

    @classmethod
    def from_bytes(cls, data, cfg: SystemConfig, cb: CodebookConfig, codec: CodecSpec):
        q_m, q_f = metadata_bits(cfg, cb), codec.bits_per_component
        data = bytes(data)
        if not data:
            raise MalformedMessageError("empty message")
        r_hat = data[0]
        if r_hat == 0:
            raise MalformedMessageError("message carries no path records")
        n_bits = HEADER_BITS + r_hat * (q_m + q_f)
        if len(data) != math.ceil(n_bits / 8):
            raise MalformedMessageError(
                f"message is {len(data)} bytes, {r_hat} records need {math.ceil(n_bits / 8)}")
        bits = _bits.from_bytes(data)
        if np.any(bits[n_bits:]):
            raise MalformedMessageError("nonzero padding bits")
        payload = bits[HEADER_BITS:n_bits].reshape(r_hat, q_m + q_f)
        return cls([(row[:q_m].copy(), row[q_m:].copy()) for row in payload])


@dataclass
class AlignedSet:
    """Decoupled and aligned components of a batch of channels, flattened."""
    aligned: np.ndarray  # (K, N_T, N_c)
    n_star: np.ndarray
    m_star: np.ndarray
    beta_index: np.ndarray
    owner: np.ndarray  # sample index of each component
    r_hat: np.ndarray  # per sample
    sigma: np.ndarray  # per component
    capped: np.ndarray  # per sample

    def __len__(self):
        return len(self.r_hat)


def decouple_and_align(channels, eta, cb: CodebookConfig, cfg: SystemConfig | None = None, r_max=16):
    """Angular-delay transform, decoupling and alignment of a stack of channels."""
    channels = np.asarray(channels)
    if channels.ndim == 2:
        channels = channels[None]
    if cfg is None:
        cfg = SystemConfig(n_tx=channels.shape[1], n_sc=channels.shape[2])
    hts = to_angular_delay(channels, cfg)
    results = decouple_batch(hts, eta, r_max)
    comps = np.concatenate([r.stack() for r in results])
    aligned, n, m, k, _ = align_many(comps, cfg, cb)
    r_hat = np.array([r.r_hat for r in results])
    return AlignedSet(
        aligned, n, m, k,
        np.repeat(np.arange(len(results)), r_hat),
        r_hat,
        np.concatenate([[c.sigma for c in r.components] for r in results]),
        np.array([r.capped for r in results]),
    )


def messages_from_aligned(aset: AlignedSet, codec: CodecSpec, cfg: SystemConfig, cb: CodebookConfig):
    _, codec_bits = encode_many(codec, aset.aligned)
    meta_bits = pack_metadata(aset.n_star, aset.m_star, aset.beta_index, cfg, cb)
    out, start = [], 0
    for r in aset.r_hat:
        out.append(FeedbackMessage([(meta_bits[i], codec_bits[i]) for i in range(start, start + r)]))
        start += r
    return out


def eg_encode_batch(channels, eta, cb: CodebookConfig, codec: CodecSpec, cfg: SystemConfig | None = None, r_max=16):
    codec.require_trained()
    channels = np.asarray(channels)
    if cfg is None:
        cfg = SystemConfig(n_tx=channels.shape[-2], n_sc=channels.shape[-1])
    aset = decouple_and_align(channels, eta, cb, cfg, r_max)
    return messages_from_aligned(aset, codec, cfg, cb)


def eg_encode(h, eta, cb: CodebookConfig, codec: CodecSpec, cfg: SystemConfig | None = None, r_max=16):
    h = np.asarray(h)
    if not np.vdot(h, h).real > 0:
        raise ZeroChannelError("cannot feed back a zero channel")
    return eg_encode_batch(h[None], eta, cb, codec, cfg, r_max)[0]


def eg_decode_batch(messages, cb: CodebookConfig, codec: CodecSpec, cfg: SystemConfig):
    codec.require_trained()
    q_m, q_f = metadata_bits(cfg, cb), codec.bits_per_component
    metas, codes, owner = [], [], []
    for s, msg in enumerate(messages):
        if msg.r_hat == 0:
            raise MalformedMessageError(f"message {s}: no path records")
        for i, (mb, cbits) in enumerate(msg.records):
            if mb.size != q_m or cbits.size != q_f:
                raise MalformedMessageError(
                    f"message {s}, record {i}: lengths ({mb.size}, {cbits.size}) != ({q_m}, {q_f})")
            try:
                metas.append(AlignmentMetadata.from_bits(mb, cfg, cb))
            except ValueError as exc:
                raise MalformedMessageError(f"message {s}, record {i}: {exc}") from exc
            codes.append(cbits)
            owner.append(s)
    decoded = decode_many(codec, np.stack(codes))
    parts = recover_many(decoded, [m.n_star for m in metas], [m.m_star for m in metas],
                         [m.beta_index for m in metas], cfg, cb)
    out = np.zeros((len(messages), cfg.n_tx, cfg.n_sc), dtype=complex)
    np.add.at(out, np.asarray(owner), parts)
    return out


def eg_decode(msg: FeedbackMessage, cb: CodebookConfig, codec: CodecSpec, cfg: SystemConfig):
    """H_hat = sum of the recovered path components of one message."""
    return eg_decode_batch([msg], cb, codec, cfg)[0]


# -- metrics ------------------------------------------------------------------

def nmse_ratio(h_true, h_hat):
    """||H_hat - H||^2 / ||H||^2 per sample (trailing two axes)."""
    h_true, h_hat = np.asarray(h_true), np.asarray(h_hat)
    num = np.sum(np.abs(h_hat - h_true) ** 2, axis=(-2, -1))
    den = np.sum(np.abs(h_true) ** 2, axis=(-2, -1))
    if np.any(~(den > 0)):
        raise ZeroChannelError("NMSE is undefined for a zero-norm reference channel")
    return num / den


def to_db(ratio):
    ratio = np.asarray(ratio, dtype=float)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(ratio)
    return np.maximum(db, NMSE_FLOOR_DB)


def nmse(h_true, h_hat):
    """NMSE in dB of a single channel (or elementwise over a stack)."""
    r = to_db(nmse_ratio(h_true, h_hat))
    return float(r) if np.ndim(r) == 0 else r


def nmse_batch(h_true, h_hat):
    """10 log10 of the mean ratio over the batch."""
    return float(to_db(np.mean(nmse_ratio(h_true, h_hat))))


@dataclass
class ReconstructionReport:
    h_hat: np.ndarray
    nmse_db: float
    r_hat: int
    bits_used: int
    per_path_energy: list = field(default_factory=list)

    def record(self, env_id):
        return {"env_id": env_id, "nmse_db": self.nmse_db, "r_hat": self.r_hat, "bits": self.bits_used}


def reconstruct(h, eta, cb: CodebookConfig, codec: CodecSpec, cfg: SystemConfig | None = None, r_max=16):
    """Encode, serialise, parse and decode one channel; report the outcome."""
    h = np.asarray(h)
    if cfg is None:
        cfg = SystemConfig(n_tx=h.shape[0], n_sc=h.shape[1])
    msg = eg_encode(h, eta, cb, codec, cfg, r_max)
    parsed = FeedbackMessage.from_bytes(msg.to_bytes(), cfg, cb, codec)
    h_hat = eg_decode(parsed, cb, codec, cfg)
    aset = decouple_and_align(h[None], eta, cb, cfg, r_max)
    return ReconstructionReport(h_hat, nmse(h, h_hat), msg.r_hat, msg.total_bits,
                                [float(s) ** 2 for s in aset.sigma])


@dataclass
class OverheadReport:
    mean_bits: float
    mean_r_hat: float
    r_hat_histogram: dict
    per_env_histogram: dict

    def to_dict(self):
        return {
            "mean_bits": self.mean_bits,
            "mean_r_hat": self.mean_r_hat,
            "r_hat_histogram": {str(k): v for k, v in sorted(self.r_hat_histogram.items())},
            "per_env_histogram": {e: {str(k): v for k, v in sorted(h.items())}
                                  for e, h in sorted(self.per_env_histogram.items())},
        }


def overhead_report(messages, env_ids=None):
    if not messages:
        raise ValueError("empty batch")
    r = [m.r_hat for m in messages]
    q = [m.total_bits for m in messages]
    env_ids = env_ids if env_ids is not None else ["all"] * len(messages)
    per_env = {}
    for e, ri in zip(env_ids, r):
        per_env.setdefault(e, Counter())[ri] += 1
    return OverheadReport(float(np.mean(q)), float(np.mean(r)), dict(Counter(r)),
                          {e: dict(c) for e, c in per_env.items()})


# -- feedback stream files -----------------------------------------------------

def save_messages(path, messages, header):
    """Container whose payload is a sequence of (uint32 LE length, message bytes)."""
    header = dict(header, format="egcsi-feedback", version=1, n_messages=len(messages))
    chunks = []
    for msg in messages:
        raw = msg.to_bytes()
        chunks.append(struct.pack("<I", len(raw)) + raw)
    atomic_write(path, pack_container(FEEDBACK_MAGIC, header, b"".join(chunks)))


def load_message_bytes(path):
    _, header, payload = read_container(path, FEEDBACK_MAGIC)
    out, off = [], 0
    for i in range(header["n_messages"]):
        if off + 4 > len(payload):
            raise MalformedMessageError(f"message {i}: truncated stream")
        (n,) = struct.unpack("<I", payload[off:off + 4])
        out.append(payload[off + 4:off + 4 + n])
        if len(out[-1]) != n:
            raise MalformedMessageError(f"message {i}: truncated stream")
        off += 4 + n
    if off != len(payload):
        raise MalformedMessageError("trailing bytes in feedback stream")
    return header, out


def write_report_jsonl(path, rows):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    atomic_write(path, text.encode("utf-8"))
