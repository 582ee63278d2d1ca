"""
FVM1 wire format for the federated round protocol. All integers and floats are
little-endian.

    prefix     magic "FVM1" (4 bytes), version u16, kind u8
               (1 = client update, 2 = global broadcast)
    update     u32 client_id, u32 L, L x u32 channel counts, u32 param length P,
               u32 sample_count, then P float64 params, then per layer
               C float64 mu_bar and C float64 sigma_bar
    broadcast  u32 round, u32 L, L x u32 channel counts, u32 param length P,
               then P float64 params, then per layer C float64 var_mu and
               C float64 var_sigma

Messages carry model parameters and channel statistics only, never voxels or labels.
"""

import struct
from dataclasses import dataclass, fields
import numpy as np
from .autograd import DTYPE
from .vfda import PrototypeVariance
from .errors import (
    MessageError,
    MessageMagicError,
    MessageVersionError,
    MessageTruncatedError,
)


MESSAGE_MAGIC = b"FVM1"
MESSAGE_VERSION = 1
KIND_UPDATE = 1
KIND_BROADCAST = 2
PREFIX = struct.Struct("<4sHB")
U32 = struct.Struct("<I")
FLOAT64 = np.dtype("<f8")


@dataclass
class ClientUpdate:
    client_id: int
    sample_count: int
    params: np.ndarray
    # one (mu_bar, sigma_bar) pair per encoder level
    stats: list[tuple[np.ndarray, np.ndarray]]


@dataclass
class GlobalBroadcast:
    round: int
    params: np.ndarray
    variances: list[PrototypeVariance]


def message_field_names(message_type: type) -> tuple[str, ...]:
    return tuple(f.name for f in fields(message_type))


def update_size(param_count: int, channels: list[int]) -> int:
    header = PREFIX.size + U32.size * (4 + len(channels))
    return header + FLOAT64.itemsize * (param_count + 2 * sum(channels))


def broadcast_size(param_count: int, channels: list[int]) -> int:
    header = PREFIX.size + U32.size * (3 + len(channels))
    return header + FLOAT64.itemsize * (param_count + 2 * sum(channels))


class _Writer:
    def __init__(self, kind: int) -> None:
        self.parts = [PREFIX.pack(MESSAGE_MAGIC, MESSAGE_VERSION, kind)]

    def u32(self, value: int) -> None:
        if not 0 <= value < 2**32:
            raise MessageError(f"Value {value} does not fit an unsigned 32 bit field")
        self.parts.append(U32.pack(value))

    def floats(self, values: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(values, dtype=FLOAT64).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, kind: int) -> None:
        self.data = memoryview(data)
        self.offset = 0
        prefix = self._take(PREFIX.size, "message prefix")
        magic, version, found_kind = PREFIX.unpack(prefix)
        if magic != MESSAGE_MAGIC:
            raise MessageMagicError(
                f"Message has magic {bytes(magic)!r}, expected {MESSAGE_MAGIC!r}"
            )
        if version != MESSAGE_VERSION:
            raise MessageVersionError(
                f"Message has version {version}, expected {MESSAGE_VERSION}"
            )
        if found_kind != kind:
            raise MessageError(f"Message has kind {found_kind}, expected {kind}")

    def _take(self, count: int, what: str) -> memoryview:
        end = self.offset + count
        if end > len(self.data):
            raise MessageTruncatedError(
                f"Message truncated reading {what}: need {end} bytes, have {len(self.data)}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self._take(U32.size, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        chunk = self._take(count * FLOAT64.itemsize, what)
        return np.frombuffer(chunk, dtype=FLOAT64).astype(DTYPE)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise MessageError(
                f"Message has {len(self.data) - self.offset} trailing bytes"
            )


def serialize_update(update: ClientUpdate) -> bytes:
    writer = _Writer(KIND_UPDATE)
    writer.u32(update.client_id)
    writer.u32(len(update.stats))
    for mu_bar, sigma_bar in update.stats:
        if mu_bar.shape != sigma_bar.shape or mu_bar.ndim != 1:
            raise MessageError(
                f"Statistic vectors must share one 1-D shape, got {mu_bar.shape} and {sigma_bar.shape}"
            )
        writer.u32(mu_bar.shape[0])
    writer.u32(update.params.shape[0])
    writer.u32(update.sample_count)
    writer.floats(update.params)
    for mu_bar, sigma_bar in update.stats:
        writer.floats(mu_bar)
        writer.floats(sigma_bar)
    return writer.getvalue()


def deserialize_update(data: bytes) -> ClientUpdate:
    reader = _Reader(data, KIND_UPDATE)
    client_id = reader.u32("client id")
    levels = reader.u32("level count")
    channels = [reader.u32("channel count") for _ in range(levels)]
    param_count = reader.u32("parameter count")
    sample_count = reader.u32("sample count")
    params = reader.floats(param_count, "parameters")
    stats = [
        (reader.floats(c, "mu_bar"), reader.floats(c, "sigma_bar")) for c in channels
    ]
    reader.finish()
    return ClientUpdate(
        client_id=client_id, sample_count=sample_count, params=params, stats=stats
    )


def serialize_broadcast(broadcast: GlobalBroadcast) -> bytes:
    writer = _Writer(KIND_BROADCAST)
    writer.u32(broadcast.round)
    writer.u32(len(broadcast.variances))
    for variance in broadcast.variances:
        writer.u32(variance.channels)
    writer.u32(broadcast.params.shape[0])
    writer.floats(broadcast.params)
    for variance in broadcast.variances:
        writer.floats(variance.var_mu)
        writer.floats(variance.var_sigma)
    return writer.getvalue()


def deserialize_broadcast(data: bytes) -> GlobalBroadcast:
    reader = _Reader(data, KIND_BROADCAST)
    round_ = reader.u32("round")
    levels = reader.u32("level count")
    channels = [reader.u32("channel count") for _ in range(levels)]
    param_count = reader.u32("parameter count")
    params = reader.floats(param_count, "parameters")
    variances = [
        PrototypeVariance(
            var_mu=reader.floats(c, "var_mu"), var_sigma=reader.floats(c, "var_sigma")
        )
        for c in channels
    ]
    reader.finish()
    return GlobalBroadcast(round=round_, params=params, variances=variances)
