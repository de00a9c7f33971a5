"""Binary container shared by datasets, codec files and feedback streams.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic, e.g. b"EGCSIDS1"
    offset 8   uint64    header length in bytes (H)
    offset 16  H bytes   UTF-8 JSON header, keys sorted
    offset 16+H ...      payload, interpretation given by the header

Writes go through a temporary file in the destination directory and are
renamed into place, so a failed write never leaves a partial file behind.
"""
import json
import os
import struct
import tempfile

DATASET_MAGIC = b"EGCSIDS1"
CODEC_MAGIC = b"EGCSICD1"
FEEDBACK_MAGIC = b"EGCSIFB1"


class ContainerError(ValueError):
    """Malformed or unexpected container contents."""


def _encode_header(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_container(magic, header, payload):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    raw = _encode_header(header)
    return magic + struct.pack("<Q", len(raw)) + raw + bytes(payload)


def unpack_container(blob, magic=None):
    if len(blob) < 16:
        raise ContainerError("truncated container")
    found = bytes(blob[:8])
    if magic is not None and found != magic:
        raise ContainerError(f"bad magic {found!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ContainerError("header length exceeds file size")
    try:
        header = json.loads(bytes(blob[16:16 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    return found, header, bytes(blob[16 + hlen:])


def atomic_write(path, data):
    """Write bytes to ``path``; the parent directory must already exist."""
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, magic, header, payload):
    atomic_write(path, pack_container(magic, header, payload))


def read_container(path, magic=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return unpack_container(blob, magic)
