"""Tests del bucle de eventos discretos (app.engine)."""

import pytest

from app.engine import EventKind, EventLoop
from app.errors import EngineFault
from app.timebase import Party


@pytest.fixture
def loop():
    loop = EventLoop()
    loop.seen = []
    for kind in EventKind:
        loop.register(kind, loop.seen.append)
    return loop


class TestEventLoop:
    """Orden total y errores del bucle."""

    def test_orden_por_tiempo_participante_detector_secuencia(self, loop):
        loop.schedule(10, Party.BOB, 0, EventKind.PHOTON, sequence=5)
        loop.schedule(10, Party.ALICE, 3, EventKind.PHOTON, sequence=9)
        loop.schedule(10, Party.BOB, 0, EventKind.DARK, sequence=1)
        loop.schedule(5, Party.EVE, 2, EventKind.PHOTON, sequence=0)

        assert loop.run() == 4
        order = [(e.time, e.party, e.detector, e.sequence) for e in loop.seen]
        assert order == [(5, 2, 2, 0), (10, 0, 3, 9), (10, 1, 0, 1), (10, 1, 0, 5)]

    def test_payloads_no_comparables(self, loop):
        """Empates completos se resuelven por orden de inserción."""
        loop.schedule(1, 0, 0, EventKind.PHOTON, payload={"a": 1}, sequence=0)
        loop.schedule(1, 0, 0, EventKind.PHOTON, payload={"b": 2}, sequence=0)
        loop.run()
        assert [e.payload for e in loop.seen] == [{"a": 1}, {"b": 2}]

    def test_run_until_es_exclusivo(self, loop):
        loop.schedule(5, 0, 0, EventKind.PHOTON)
        loop.schedule(10, 0, 0, EventKind.PHOTON)
        assert loop.run(until=10) == 1
        assert loop.peek_time() == 10
        assert len(loop) == 1
        assert loop.now == 5

    def test_los_manejadores_pueden_programar(self):
        loop = EventLoop()
        seen = []

        def handler(event):
            seen.append(event.time)
            if event.time < 30:
                loop.schedule(event.time + 10, 0, 0, EventKind.FAKED_STATE)

        loop.register(EventKind.FAKED_STATE, handler)
        loop.schedule(0, 0, 0, EventKind.FAKED_STATE)
        loop.run()
        assert seen == [0, 10, 20, 30]
        assert loop.processed == 4

    def test_evento_en_el_pasado(self, loop):
        loop.schedule(100, 0, 0, EventKind.PHOTON)
        loop.run()
        with pytest.raises(EngineFault, match="pasado"):
            loop.schedule(99, 0, 0, EventKind.PHOTON)

    def test_sin_manejador(self):
        loop = EventLoop()
        loop.schedule(0, 0, 0, EventKind.TEST_PHOTON)
        with pytest.raises(EngineFault, match="TEST_PHOTON"):
            loop.run()
