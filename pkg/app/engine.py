"""Bucle de eventos discretos determinista.

Los eventos se ordenan por (tiempo, participante, detector, secuencia). La
secuencia la aporta quien programa el evento (por ejemplo, el identificador
del par); si no la da, se usa un contador de inserción. Un contador interno
final garantiza que nunca se comparen payloads.
"""

import heapq
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable, Optional

from app.errors import EngineFault

logger = logging.getLogger(__name__)


class EventKind(IntEnum):
    PHOTON = 0
    FAKED_STATE = 1
    DARK = 2
    TEST_PHOTON = 3


@dataclass(frozen=True)
class Event:
    time: int
    party: int
    detector: int
    sequence: int
    kind: EventKind
    payload: Any = None


Handler = Callable[[Event], None]


class EventLoop:
    """Cola de prioridad sobre heapq con despacho por tipo de evento."""

    def __init__(self) -> None:
        self._queue: list[tuple] = []
        self._handlers: dict[EventKind, Handler] = {}
        self._inserted = 0
        self.now = 0
        self.processed = 0

    def register(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(
        self,
        time: int,
        party: int,
        detector: int,
        kind: EventKind,
        payload: Any = None,
        sequence: Optional[int] = None,
    ) -> None:
        """
        Programa un evento.

        Raises:
            EngineFault: Si el tiempo es anterior al del último evento procesado.
        """
        if time < self.now:
            raise EngineFault(f"Evento en el pasado: t={time} < ahora={self.now} ({kind.name})")
        seq = self._inserted if sequence is None else sequence
        heapq.heappush(
            self._queue, (time, int(party), int(detector), seq, self._inserted, kind, payload)
        )
        self._inserted += 1

    def __len__(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def run(self, until: Optional[int] = None) -> int:
        """
        Procesa eventos en orden estricto.

        Args:
            until: Procesa solo los eventos con tiempo < until (None = todos).

        Returns:
            Número de eventos procesados en esta llamada.
        """
        processed = 0
        queue = self._queue
        while queue and (until is None or queue[0][0] < until):
            time, party, detector, seq, _, kind, payload = heapq.heappop(queue)
            self.now = time
            handler = self._handlers.get(kind)
            if handler is None:
                raise EngineFault(f"Sin manejador para eventos {kind.name}")
            handler(Event(time, party, detector, seq, kind, payload))
            processed += 1
        self.processed += processed
        return processed
