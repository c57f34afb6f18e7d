"""Persistencia binaria particionada por época.

Tres formatos, todos little-endian y cerrados con un CRC32 de todo lo anterior:

- Clics (``.clk``): cabecera ``QKCL`` + registros de 5 bytes (offset u32 en la
  época, detector u8).
- Frames recibidos (``.frames``): cabecera ``QKFR`` + registros
  (secuencia u64, longitud u32, bytes del frame tal como viajó).
- Claves (``.key``): cabecera ``QKKY`` + número de bits u64 + bits empaquetados.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.errors import StorageError
from app.timebase import EPOCH_SHIFT, ClickStream, Party
from app.transport import CapturedFrame, Direction

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CLICK_MAGIC = b"QKCL"
FRAMES_MAGIC = b"QKFR"
KEY_MAGIC = b"QKKY"

# magic, versión, participante/dirección, reservado, época, número de registros
_HEADER = struct.Struct("<4sBBHII")
_CRC = struct.Struct("<I")
_CLICK_RECORD = np.dtype([("offset", "<u4"), ("detector", "u1")])
_FRAME_RECORD = struct.Struct("<QI")
_KEY_LENGTH = struct.Struct("<Q")

_DIRECTION_CODES = {Direction.BOB_TO_ALICE: 0, Direction.ALICE_TO_BOB: 1}
_DIRECTIONS = {v: k for k, v in _DIRECTION_CODES.items()}


def epoch_filename(epoch: int, suffix: str) -> str:
    return f"{epoch:08x}{suffix}"


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _open(data: bytes, magic: bytes, path: Path) -> tuple[tuple, bytes]:
    """Valida magic, versión y CRC; devuelve la cabecera y el cuerpo."""
    if len(data) < _HEADER.size + _CRC.size:
        raise StorageError(f"{path}: archivo truncado ({len(data)} bytes)")
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    header = _HEADER.unpack_from(body)
    if header[0] != magic:
        raise StorageError(f"{path}: magic {header[0]!r}, se esperaba {magic!r}")
    if header[1] != FORMAT_VERSION:
        raise StorageError(f"{path}: versión de formato {header[1]} no soportada")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise StorageError(f"{path}: CRC no coincide")
    return header, body[_HEADER.size :]


# ==================== CLICS ====================


def write_clicks(directory: Path, stream: ClickStream) -> list[Path]:
    """Escribe un archivo por época con los clics de un participante."""
    directory.mkdir(parents=True, exist_ok=True)
    stream = stream if stream.is_sorted() else stream.sorted()
    epochs = stream.epochs()
    written = []
    for epoch in np.unique(epochs).tolist():
        mask = epochs == epoch
        records = np.empty(int(mask.sum()), dtype=_CLICK_RECORD)
        records["offset"] = stream.timestamps[mask] - (epoch << EPOCH_SHIFT)
        records["detector"] = stream.detectors[mask]
        header = _HEADER.pack(CLICK_MAGIC, FORMAT_VERSION, int(stream.party), 0, epoch, records.size)
        path = directory / epoch_filename(epoch, ".clk")
        path.write_bytes(_seal(header + records.tobytes()))
        written.append(path)
    logger.debug(f"{len(stream)} clics de {stream.party.name} escritos en {directory}")
    return written


def read_clicks(directory: Path) -> ClickStream:
    """
    Lee todos los archivos de clics de un directorio.

    Raises:
        StorageError: Si algún archivo está corrupto o mezcla participantes.
    """
    paths = sorted(Path(directory).glob("*.clk"))
    times, detectors = [], []
    party = None
    for path in paths:
        header, body = _open(path.read_bytes(), CLICK_MAGIC, path)
        _, _, file_party, _, epoch, count = header
        if party is not None and file_party != party:
            raise StorageError(f"{path}: mezcla clics de varios participantes")
        party = file_party
        if len(body) != count * _CLICK_RECORD.itemsize:
            raise StorageError(f"{path}: {len(body)} bytes para {count} registros")
        records = np.frombuffer(body, dtype=_CLICK_RECORD, count=count)
        times.append((epoch << EPOCH_SHIFT) + records["offset"].astype(np.int64))
        detectors.append(records["detector"].astype(np.int8))
    if party is None:
        return ClickStream(Party.ALICE)
    return ClickStream(Party(party), np.concatenate(times), np.concatenate(detectors))


# ==================== FRAMES ====================


def write_frames(directory: Path, frames: list[CapturedFrame], direction: Direction) -> list[Path]:
    """Guarda, por época, los frames que recibió el destinatario de ``direction``."""
    directory.mkdir(parents=True, exist_ok=True)
    by_epoch: dict[int, list[CapturedFrame]] = {}
    for captured in frames:
        if captured.direction is direction:
            by_epoch.setdefault(captured.frame.epoch, []).append(captured)

    written = []
    for epoch in sorted(by_epoch):
        entries = by_epoch[epoch]
        parts = [
            _HEADER.pack(
                FRAMES_MAGIC, FORMAT_VERSION, _DIRECTION_CODES[direction], 0, epoch, len(entries)
            )
        ]
        for captured in entries:
            parts.append(_FRAME_RECORD.pack(captured.sequence, len(captured.data)))
            parts.append(captured.data)
        path = directory / epoch_filename(epoch, ".frames")
        path.write_bytes(_seal(b"".join(parts)))
        written.append(path)
    return written


def read_frames(directory: Path) -> list[CapturedFrame]:
    """Frames de un directorio, en el orden en que se guardaron."""
    captured: list[CapturedFrame] = []
    for path in sorted(Path(directory).glob("*.frames")):
        header, body = _open(path.read_bytes(), FRAMES_MAGIC, path)
        direction = _DIRECTIONS.get(header[2])
        if direction is None:
            raise StorageError(f"{path}: dirección desconocida {header[2]}")
        pos = 0
        for _ in range(header[5]):
            if pos + _FRAME_RECORD.size > len(body):
                raise StorageError(f"{path}: registro de frame truncado")
            sequence, length = _FRAME_RECORD.unpack_from(body, pos)
            pos += _FRAME_RECORD.size
            data = body[pos : pos + length]
            if len(data) != length:
                raise StorageError(f"{path}: frame truncado")
            captured.append(CapturedFrame(sequence, direction, data))
            pos += length
        if pos != len(body):
            raise StorageError(f"{path}: {len(body) - pos} bytes sobrantes")
    return captured


def merge_transcript(*directories: Path) -> list[CapturedFrame]:
    """Une los frames de ambos lados en el orden de entrega del canal."""
    frames = [f for d in directories for f in read_frames(d)]
    return sorted(frames, key=lambda c: c.sequence)


# ==================== CLAVES ====================


@dataclass
class StoredKey:
    party: Party
    first_epoch: int
    num_epochs: int
    bits: np.ndarray


def write_key(path: Path, key: StoredKey) -> Path:
    bits = np.asarray(key.bits, dtype=np.uint8)
    header = _HEADER.pack(
        KEY_MAGIC, FORMAT_VERSION, int(key.party), 0, key.first_epoch, key.num_epochs
    )
    payload = _KEY_LENGTH.pack(bits.size) + np.packbits(bits, bitorder="little").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_seal(header + payload))
    return path


def read_key(path: Path) -> StoredKey:
    header, body = _open(Path(path).read_bytes(), KEY_MAGIC, Path(path))
    if len(body) < _KEY_LENGTH.size:
        raise StorageError(f"{path}: falta la longitud de la clave")
    (nbits,) = _KEY_LENGTH.unpack_from(body)
    packed = np.frombuffer(body[_KEY_LENGTH.size :], dtype=np.uint8)
    if packed.size != (nbits + 7) // 8:
        raise StorageError(f"{path}: {packed.size} bytes para {nbits} bits")
    bits = np.unpackbits(packed, count=nbits, bitorder="little")
    return StoredKey(Party(header[2]), header[4], header[5], bits)


def read_key_directory(directory: Path) -> np.ndarray:
    """Concatena las claves de un directorio en orden de época."""
    parts = [read_key(p).bits for p in sorted(Path(directory).glob("*.key"))]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
