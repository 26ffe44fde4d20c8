"""Binary model archives: self-describing, checksummed, bit-exact round trips.

Layout (all integers little-endian):

    magic b"TTBN" | u32 format version | u64 header length | header JSON
    | u64 payload length | payload | 32-byte SHA-256 of (header || payload)

The JSON header carries the architecture (factorizations, rank vectors,
activations), the prior hyperparameters, the particle count, the payload
dtype, and free-form training metadata, so an archive loads without the
original config.  The payload is each particle's flat parameter vector in
the documented flattening order (cores row-major, then rank scales, then
bias, per layer).  float64 round-trips losslessly; float32 is an optional
compact encoding for shipped models.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .inference import ParticleLayout
from .model import LayerSpec, Network, Particle
from .priors import PriorConfig
from .tt import FactorizedShape

__all__ = [
    "ArchiveError",
    "ArchiveVersionError",
    "ArchiveChecksumError",
    "ArchiveTruncatedError",
    "Archive",
    "save_archive",
    "load_archive",
    "write_archive",
    "read_archive",
]

MAGIC = b"TTBN"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """Unreadable or malformed model archive."""


class ArchiveVersionError(ArchiveError):
    pass


class ArchiveChecksumError(ArchiveError):
    pass


class ArchiveTruncatedError(ArchiveError):
    pass


@dataclass
class Archive:
    net: Network
    particles: list[Particle]
    prior: PriorConfig
    metadata: dict = field(default_factory=dict)

    @property
    def particle_count(self) -> int:
        return len(self.particles)


def _header_dict(archive: Archive, dtype: str) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dtype": dtype,
        "particles": archive.particle_count,
        "layers": [
            {
                "row_factors": list(spec.shape.row_factors),
                "col_factors": list(spec.shape.col_factors),
                "ranks": list(spec.ranks),
                "activation": spec.activation,
            }
            for spec in archive.net.layers
        ],
        "prior": {
            "gamma_shape": archive.prior.gamma_shape,
            "gamma_rate": archive.prior.gamma_rate,
            "weak_variance": archive.prior.weak_variance,
        },
        "metadata": archive.metadata,
    }


def save_archive(archive: Archive, dtype: str = "f8") -> bytes:
    """Serialize to bytes; ``dtype`` is "f8" (lossless) or "f4" (compact)."""
    if dtype not in ("f8", "f4"):
        raise ArchiveError(f"unsupported payload dtype {dtype!r}")
    layout = ParticleLayout(archive.net)
    flat = np.concatenate([layout.flatten(p) for p in archive.particles])
    payload = flat.astype("<" + dtype).tobytes()
    header = json.dumps(_header_dict(archive, dtype), sort_keys=True).encode("utf-8")
    body = (
        MAGIC
        + struct.pack("<I", FORMAT_VERSION)
        + struct.pack("<Q", len(header))
        + header
        + struct.pack("<Q", len(payload))
        + payload
    )
    digest = hashlib.sha256(header + payload).digest()
    return body + digest


def load_archive(blob: bytes) -> Archive:
    """Parse bytes back into an archive, verifying version and checksum."""
    if len(blob) < 16:
        raise ArchiveTruncatedError("archive shorter than its fixed header")
    if blob[:4] != MAGIC:
        raise ArchiveError(f"bad magic {blob[:4]!r}, not a model archive")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(
            f"format version {version}, this build reads {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    pos = 16
    if len(blob) < pos + header_len + 8:
        raise ArchiveTruncatedError("archive ends inside the header")
    header_bytes = blob[pos : pos + header_len]
    pos += header_len
    (payload_len,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    if len(blob) < pos + payload_len + 32:
        raise ArchiveTruncatedError("archive ends inside the payload")
    payload = blob[pos : pos + payload_len]
    pos += payload_len
    digest = blob[pos : pos + 32]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise ArchiveChecksumError("payload checksum mismatch")

    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ArchiveError(f"unreadable header: {err}") from err

    dtype = header.get("dtype", "f8")
    if dtype not in ("f8", "f4"):
        raise ArchiveError(f"unsupported payload dtype {dtype!r}")
    specs = tuple(
        LayerSpec(
            FactorizedShape(tuple(l["row_factors"]), tuple(l["col_factors"])),
            tuple(l["ranks"]),
            l["activation"],
        )
        for l in header["layers"]
    )
    net = Network(specs)
    prior = PriorConfig(**header["prior"])
    layout = ParticleLayout(net)
    n = int(header["particles"])
    flat = np.frombuffer(payload, dtype="<" + dtype).astype(np.float64)
    if flat.size != n * layout.size:
        raise ArchiveError(
            f"payload holds {flat.size} values, expected {n * layout.size}"
        )
    particles = [
        layout.unflatten(flat[i * layout.size : (i + 1) * layout.size]) for i in range(n)
    ]
    return Archive(net, particles, prior, header.get("metadata", {}))


def write_archive(path, archive: Archive, dtype: str = "f8") -> None:
    with open(path, "wb") as f:
        f.write(save_archive(archive, dtype))


def read_archive(path) -> Archive:
    with open(path, "rb") as f:
        return load_archive(f.read())
