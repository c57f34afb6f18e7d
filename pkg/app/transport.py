"""Canal clásico entre Alice y Bob.

Por defecto es una cola en proceso, ordenada, fiable y dúplex. Cada frame se
serializa al enviarse, de modo que cualquier escucha (Eve) ve exactamente los
bytes que circulan. El adaptador asyncio permite llevar los mismos frames por
un socket.
"""

import asyncio
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from app.errors import ProtocolError
from app.frames import FrameDecoder, ProtocolFrame, decode_frame, encode_frame

logger = logging.getLogger(__name__)

READ_CHUNK = 65_536


class Direction(str, Enum):
    BOB_TO_ALICE = "BOB_TO_ALICE"
    ALICE_TO_BOB = "ALICE_TO_BOB"

    @property
    def receiver(self) -> str:
        return "alice" if self is Direction.BOB_TO_ALICE else "bob"


@dataclass(frozen=True)
class CapturedFrame:
    """Frame tal como se entregó, con su número de secuencia global."""

    sequence: int
    direction: Direction
    data: bytes

    @property
    def frame(self) -> ProtocolFrame:
        return decode_frame(self.data)


Tap = Callable[[CapturedFrame], None]


class ClassicalChannel:
    """Cola dúplex en proceso con escuchas pasivas."""

    def __init__(self) -> None:
        self._queues: dict[Direction, deque[bytes]] = {d: deque() for d in Direction}
        self._taps: list[Tap] = []
        self._sequence = 0
        self._last_epoch = 0
        self.frames_sent = 0
        self.bytes_sent = 0

    def attach_tap(self, tap: Tap) -> None:
        """Registra una escucha que recibe cada frame en orden de entrega."""
        self._taps.append(tap)

    def send(self, direction: Direction, frame: ProtocolFrame) -> None:
        """
        Encola un frame.

        Raises:
            ProtocolError: Si la época retrocede respecto al último frame.
        """
        if frame.epoch < self._last_epoch:
            raise ProtocolError(
                f"Época decreciente en el canal: {frame.epoch} < {self._last_epoch}"
            )
        self._last_epoch = frame.epoch
        data = encode_frame(frame)
        self._queues[direction].append(data)
        captured = CapturedFrame(self._sequence, direction, data)
        self._sequence += 1
        self.frames_sent += 1
        self.bytes_sent += len(data)
        for tap in self._taps:
            tap(captured)

    def receive(self, direction: Direction) -> ProtocolFrame:
        """
        Desencola el siguiente frame de una dirección.

        Raises:
            ProtocolError: Si no hay frames pendientes.
        """
        queue = self._queues[direction]
        if not queue:
            raise ProtocolError(f"No hay frames pendientes hacia {direction.receiver}")
        return decode_frame(queue.popleft())

    def pending(self, direction: Direction) -> int:
        return len(self._queues[direction])


# ==================== ADAPTADOR DE FLUJO ====================


class StreamTransport:
    """Frames sobre un flujo de bytes asyncio (por ejemplo, un socket TCP)."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._reader = reader
        self._writer = writer
        self._decoder = FrameDecoder()
        self._ready: deque[ProtocolFrame] = deque()

    @classmethod
    async def connect(cls, host: str, port: int) -> "StreamTransport":
        reader, writer = await asyncio.open_connection(host, port)
        logger.info(f"Transporte conectado a {host}:{port}")
        return cls(reader, writer)

    async def send(self, frame: ProtocolFrame) -> None:
        self._writer.write(encode_frame(frame))
        await self._writer.drain()

    async def receive(self) -> Optional[ProtocolFrame]:
        """Siguiente frame válido, o None si el otro extremo cerró el flujo."""
        while not self._ready:
            chunk = await self._reader.read(READ_CHUNK)
            if not chunk:
                return None
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.popleft()

    @property
    def discarded_bytes(self) -> int:
        return self._decoder.discarded_bytes

    async def close(self) -> None:
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError) as e:
            logger.debug(f"Error cerrando el transporte: {e}")
