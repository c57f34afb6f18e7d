"""Codec binario de los frames del canal clásico.

Formato (todos los enteros little-endian)::

    magic "QKDC" (4) | version (1) | type (1) | epoch u32 | payload_len u32 | payload | crc32

El CRC32 cubre cabecera + payload.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

import numpy as np

from app.errors import (
    BadMagicError,
    CrcMismatchError,
    FrameError,
    PayloadLengthError,
    TruncatedFrameError,
    UnknownFrameTypeError,
    UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"QKDC"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
HEADER_SIZE = HEADER.size  # 14
CRC = struct.Struct("<I")
CRC_SIZE = CRC.size
MAX_PAYLOAD = 64 * 1024 * 1024
U32_MAX = 0xFFFFFFFF


class FrameType(IntEnum):
    TIMING = 0x01
    SIFT_ACK = 0x02
    EC_PARITY = 0x03
    EC_REPLY = 0x04
    PA_SEED = 0x05
    SESSION_CTL = 0x06


@dataclass(frozen=True)
class ProtocolFrame:
    type: FrameType
    epoch: int
    payload: bytes = b""
    version: int = VERSION


def encode_frame(frame: ProtocolFrame) -> bytes:
    """Serializa un frame con su CRC."""
    if not 0 <= frame.epoch <= U32_MAX:
        raise ValueError(f"Época fuera de rango u32: {frame.epoch}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise ValueError(f"Payload demasiado grande: {len(frame.payload)} bytes")
    header = HEADER.pack(MAGIC, frame.version, int(frame.type), frame.epoch, len(frame.payload))
    body = header + frame.payload
    return body + CRC.pack(zlib.crc32(body))


def decode_frame(data: bytes) -> ProtocolFrame:
    """
    Decodifica exactamente un frame.

    Raises:
        TruncatedFrameError: Faltan bytes.
        BadMagicError: Magic incorrecto.
        UnsupportedVersionError: Versión desconocida.
        PayloadLengthError: Sobran bytes tras el CRC.
        CrcMismatchError: CRC inválido.
        UnknownFrameTypeError: Tipo fuera de la tabla.
    """
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise TruncatedFrameError(f"Frame truncado: {len(data)} bytes")
    magic, version, ftype, epoch, payload_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"Magic inválido: {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"Versión no soportada: {version}")

    total = HEADER_SIZE + payload_len + CRC_SIZE
    if len(data) < total:
        raise TruncatedFrameError(f"Frame truncado: {len(data)} de {total} bytes")
    if len(data) > total:
        raise PayloadLengthError(f"payload_len={payload_len} no cubre {len(data)} bytes")

    (crc,) = CRC.unpack_from(data, total - CRC_SIZE)
    if crc != zlib.crc32(data[: total - CRC_SIZE]):
        raise CrcMismatchError("CRC32 no coincide")

    try:
        frame_type = FrameType(ftype)
    except ValueError as e:
        raise UnknownFrameTypeError(f"Tipo de frame desconocido: 0x{ftype:02x}") from e

    return ProtocolFrame(
        type=frame_type,
        epoch=epoch,
        payload=bytes(data[HEADER_SIZE : HEADER_SIZE + payload_len]),
        version=version,
    )


class FrameDecoder:
    """
    Decodificador incremental para flujos de bytes.

    Ante un frame corrupto descarta un byte y se resincroniza buscando el
    siguiente magic.
    """

    def __init__(self) -> None:
        self._buffer = bytearray()
        self.discarded_bytes = 0

    def feed(self, data: bytes) -> list[ProtocolFrame]:
        self._buffer.extend(data)
        frames: list[ProtocolFrame] = []
        while True:
            start = self._buffer.find(MAGIC)
            if start < 0:
                keep = len(MAGIC) - 1
                drop = max(0, len(self._buffer) - keep)
                self.discarded_bytes += drop
                del self._buffer[:drop]
                break
            if start > 0:
                self.discarded_bytes += start
                del self._buffer[:start]
            if len(self._buffer) < HEADER_SIZE:
                break
            payload_len = struct.unpack_from("<I", self._buffer, 10)[0]
            if payload_len > MAX_PAYLOAD:
                self._skip_one()
                continue
            total = HEADER_SIZE + payload_len + CRC_SIZE
            if len(self._buffer) < total:
                break
            try:
                frames.append(decode_frame(bytes(self._buffer[:total])))
            except FrameError as e:
                logger.warning(f"Frame descartado en el flujo: {e}")
                self._skip_one()
                continue
            del self._buffer[:total]
        return frames

    def _skip_one(self) -> None:
        del self._buffer[:1]
        self.discarded_bytes += 1

    @property
    def pending(self) -> int:
        return len(self._buffer)


# ==================== PAYLOADS ====================


def _check_length(data: bytes, expected: int, what: str) -> None:
    if len(data) != expected:
        raise PayloadLengthError(f"{what}: se esperaban {expected} bytes, hay {len(data)}")


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def _unpack_bits(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    return np.unpackbits(raw, count=count, bitorder="little")


_TIMING_RECORD = np.dtype([("offset", "<u4"), ("flags", "u1")])
_COUNT = struct.Struct("<I")


@dataclass
class TimingPayload:
    """Anuncio de Bob: offset intra-época y base de cada clic. Sin bits ni detector."""

    offsets: np.ndarray
    bases: np.ndarray

    def __post_init__(self) -> None:
        self.offsets = np.asarray(self.offsets, dtype=np.uint32)
        self.bases = np.asarray(self.bases, dtype=np.uint8)
        if self.offsets.shape != self.bases.shape:
            raise ValueError("offsets y bases deben tener la misma longitud")
        if np.any(np.diff(self.offsets.astype(np.int64)) <= 0):
            raise ValueError("Los offsets de TIMING deben ser estrictamente crecientes")
        if np.any(self.bases > 1):
            raise ValueError("La base es un único bit")

    def __len__(self) -> int:
        return int(self.offsets.size)

    def to_bytes(self) -> bytes:
        records = np.empty(self.offsets.size, dtype=_TIMING_RECORD)
        records["offset"] = self.offsets
        records["flags"] = self.bases & 0x01
        return _COUNT.pack(self.offsets.size) + records.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TimingPayload":
        if len(data) < _COUNT.size:
            raise PayloadLengthError("TIMING sin contador")
        (count,) = _COUNT.unpack_from(data)
        _check_length(data, _COUNT.size + count * _TIMING_RECORD.itemsize, "TIMING")
        records = np.frombuffer(data, dtype=_TIMING_RECORD, count=count, offset=_COUNT.size)
        if np.any(records["flags"] & 0xFE):
            raise FrameError("Bits reservados distintos de cero en TIMING")
        try:
            return cls(records["offset"].copy(), records["flags"].copy())
        except ValueError as e:
            raise FrameError(f"TIMING inválido: {e}") from e


@dataclass
class SiftAckPayload:
    """Índices (en el TIMING de la misma época) que Alice confirma."""

    indices: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
            raise ValueError("Los índices de SIFT_ACK deben ser estrictamente crecientes")

    def __len__(self) -> int:
        return int(self.indices.size)

    def to_bytes(self) -> bytes:
        return _COUNT.pack(self.indices.size) + self.indices.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SiftAckPayload":
        if len(data) < _COUNT.size:
            raise PayloadLengthError("SIFT_ACK sin contador")
        (count,) = _COUNT.unpack_from(data)
        _check_length(data, _COUNT.size + 4 * count, "SIFT_ACK")
        indices = np.frombuffer(data, dtype="<u4", count=count, offset=_COUNT.size)
        try:
            return cls(indices.copy())
        except ValueError as e:
            raise FrameError(f"SIFT_ACK inválido: {e}") from e


class EcParityKind(IntEnum):
    BLOCKS = 0  # paridades de todos los bloques de una pasada
    ANSWERS = 1  # respuestas a consultas de bisección


_EC_PARITY = struct.Struct("<BBQII")


@dataclass
class EcParityPayload:
    kind: EcParityKind
    pass_index: int
    seed: int
    block_size: int
    parities: np.ndarray

    def __post_init__(self) -> None:
        self.parities = np.asarray(self.parities, dtype=np.uint8)

    def to_bytes(self) -> bytes:
        head = _EC_PARITY.pack(
            int(self.kind), self.pass_index, self.seed, self.block_size, self.parities.size
        )
        return head + _pack_bits(self.parities)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EcParityPayload":
        if len(data) < _EC_PARITY.size:
            raise PayloadLengthError("EC_PARITY truncado")
        kind, pass_index, seed, block_size, count = _EC_PARITY.unpack_from(data)
        _check_length(data, _EC_PARITY.size + (count + 7) // 8, "EC_PARITY")
        try:
            parity_kind = EcParityKind(kind)
        except ValueError as e:
            raise FrameError(f"Tipo de EC_PARITY desconocido: {kind}") from e
        bits = _unpack_bits(data[_EC_PARITY.size :], count)
        return cls(parity_kind, pass_index, seed, block_size, bits)


_EC_QUERY = np.dtype([("pass", "u1"), ("start", "<u4"), ("end", "<u4")])


@dataclass
class EcReplyPayload:
    """Consultas de Bob: rangos [start, end) en el orden permutado de una pasada."""

    queries: list[tuple[int, int, int]] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        records = np.empty(len(self.queries), dtype=_EC_QUERY)
        if self.queries:
            arr = np.array(self.queries, dtype=np.int64)
            records["pass"] = arr[:, 0]
            records["start"] = arr[:, 1]
            records["end"] = arr[:, 2]
        return _COUNT.pack(len(self.queries)) + records.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EcReplyPayload":
        if len(data) < _COUNT.size:
            raise PayloadLengthError("EC_REPLY sin contador")
        (count,) = _COUNT.unpack_from(data)
        _check_length(data, _COUNT.size + count * _EC_QUERY.itemsize, "EC_REPLY")
        records = np.frombuffer(data, dtype=_EC_QUERY, count=count, offset=_COUNT.size)
        queries = list(
            zip(records["pass"].tolist(), records["start"].tolist(), records["end"].tolist())
        )
        return cls(queries)


_PA_SEED = struct.Struct("<QII")


@dataclass
class PaSeedPayload:
    seed: int
    input_length: int
    output_length: int

    def to_bytes(self) -> bytes:
        return _PA_SEED.pack(self.seed, self.input_length, self.output_length)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PaSeedPayload":
        _check_length(data, _PA_SEED.size, "PA_SEED")
        return cls(*_PA_SEED.unpack(data))


# ==================== SESSION_CTL ====================


class CtlKind(IntEnum):
    BLOCK_START = 1
    QBER_SAMPLE = 2
    QBER_RESULT = 3
    VERIFY_HASH = 4
    ABORT = 5


@dataclass
class BlockStart:
    first_epoch: int
    num_epochs: int


@dataclass
class QberSample:
    """Semilla del muestreo y bits revelados por Bob (se descartan de la clave)."""

    seed: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)


@dataclass
class QberResult:
    errors: int
    sampled: int


@dataclass
class VerifyHash:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 8:
            raise ValueError("El hash de verificación ocupa 8 bytes")


class AbortReason(IntEnum):
    HASH_MISMATCH = 1
    PROTOCOL = 2


@dataclass
class Abort:
    reason: AbortReason
    first_epoch: int


CtlPayload = Union[BlockStart, QberSample, QberResult, VerifyHash, Abort]

_BLOCK_START = struct.Struct("<II")
_QBER_SAMPLE = struct.Struct("<QI")
_QBER_RESULT = struct.Struct("<II")
_ABORT = struct.Struct("<BI")


def encode_ctl(payload: CtlPayload) -> bytes:
    if isinstance(payload, BlockStart):
        return bytes([CtlKind.BLOCK_START]) + _BLOCK_START.pack(
            payload.first_epoch, payload.num_epochs
        )
    if isinstance(payload, QberSample):
        return (
            bytes([CtlKind.QBER_SAMPLE])
            + _QBER_SAMPLE.pack(payload.seed, payload.bits.size)
            + _pack_bits(payload.bits)
        )
    if isinstance(payload, QberResult):
        return bytes([CtlKind.QBER_RESULT]) + _QBER_RESULT.pack(payload.errors, payload.sampled)
    if isinstance(payload, VerifyHash):
        return bytes([CtlKind.VERIFY_HASH]) + payload.digest
    if isinstance(payload, Abort):
        return bytes([CtlKind.ABORT]) + _ABORT.pack(int(payload.reason), payload.first_epoch)
    raise TypeError(f"Payload de control no soportado: {type(payload).__name__}")


def decode_ctl(data: bytes) -> CtlPayload:
    if not data:
        raise PayloadLengthError("SESSION_CTL vacío")
    kind, body = data[0], data[1:]
    if kind == CtlKind.BLOCK_START:
        _check_length(body, _BLOCK_START.size, "BLOCK_START")
        return BlockStart(*_BLOCK_START.unpack(body))
    if kind == CtlKind.QBER_SAMPLE:
        if len(body) < _QBER_SAMPLE.size:
            raise PayloadLengthError("QBER_SAMPLE truncado")
        seed, count = _QBER_SAMPLE.unpack_from(body)
        _check_length(body, _QBER_SAMPLE.size + (count + 7) // 8, "QBER_SAMPLE")
        return QberSample(seed, _unpack_bits(body[_QBER_SAMPLE.size :], count))
    if kind == CtlKind.QBER_RESULT:
        _check_length(body, _QBER_RESULT.size, "QBER_RESULT")
        return QberResult(*_QBER_RESULT.unpack(body))
    if kind == CtlKind.VERIFY_HASH:
        _check_length(body, 8, "VERIFY_HASH")
        return VerifyHash(bytes(body))
    if kind == CtlKind.ABORT:
        _check_length(body, _ABORT.size, "ABORT")
        reason, first_epoch = _ABORT.unpack(body)
        try:
            return Abort(AbortReason(reason), first_epoch)
        except ValueError as e:
            raise FrameError(f"Motivo de ABORT desconocido: {reason}") from e
    raise FrameError(f"Tipo de SESSION_CTL desconocido: {kind}")


# ==================== FRAMES TIPADOS ====================

Payload = Union[TimingPayload, SiftAckPayload, EcParityPayload, EcReplyPayload, PaSeedPayload, CtlPayload]

_PAYLOAD_TYPES = {
    TimingPayload: FrameType.TIMING,
    SiftAckPayload: FrameType.SIFT_ACK,
    EcParityPayload: FrameType.EC_PARITY,
    EcReplyPayload: FrameType.EC_REPLY,
    PaSeedPayload: FrameType.PA_SEED,
}


def make_frame(epoch: int, payload: Payload) -> ProtocolFrame:
    """Construye el frame correspondiente al tipo de payload."""
    frame_type = _PAYLOAD_TYPES.get(type(payload))
    if frame_type is None:
        return ProtocolFrame(FrameType.SESSION_CTL, epoch, encode_ctl(payload))
    return ProtocolFrame(frame_type, epoch, payload.to_bytes())


def parse_payload(frame: ProtocolFrame) -> Payload:
    """Decodifica el payload según el tipo del frame."""
    if frame.type is FrameType.TIMING:
        return TimingPayload.from_bytes(frame.payload)
    if frame.type is FrameType.SIFT_ACK:
        return SiftAckPayload.from_bytes(frame.payload)
    if frame.type is FrameType.EC_PARITY:
        return EcParityPayload.from_bytes(frame.payload)
    if frame.type is FrameType.EC_REPLY:
        return EcReplyPayload.from_bytes(frame.payload)
    if frame.type is FrameType.PA_SEED:
        return PaSeedPayload.from_bytes(frame.payload)
    return decode_ctl(frame.payload)
