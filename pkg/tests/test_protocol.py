"""Tests del pipeline de clave entre Alice y Bob (app.protocol)."""

from unittest.mock import patch

import numpy as np
import pytest

from app.config import CoincidenceWindowConfig, DoubleClickPolicy, ProtocolConfig
from app.errors import ProtocolError, ReconciliationFailure
from app.frames import FrameType, SiftAckPayload, make_frame, parse_payload
from app.photonics import PORT_BASIS, PORT_BIT, Port
from app.protocol import (
    AliceStation,
    BobStation,
    SiftedKey,
    handle_double_click,
    process_block,
    resolve_double_clicks,
    session_epochs,
    sift,
)
from app.reconciliation import cascade_correct
from app.timebase import ClickRecord, ClickStream, Party
from app.transport import ClassicalChannel, Direction

# Puerto de Bob anticorrelacionado con cada puerto de Alice (misma base, bit opuesto)
PARTNER = {Port.V: Port.H, Port.H: Port.V, Port.PLUS45: Port.MINUS45, Port.MINUS45: Port.PLUS45}


def _correlated_streams(n, error_rate, seed, spacing=10_000, offset=0):
    """Clics de Alice y Bob en la misma base; Bob repite el bit de Alice con probabilidad error_rate."""
    rng = np.random.default_rng(seed)
    times = 1000 + np.arange(n, dtype=np.int64) * spacing
    alice_ports = rng.integers(0, 4, n).astype(np.int8)
    bob_ports = np.array([PARTNER[Port(p)] for p in alice_ports.tolist()], dtype=np.int8)
    flips = rng.random(n) < error_rate
    bob_ports[flips] = alice_ports[flips]
    return (
        ClickStream(Party.ALICE, times, alice_ports),
        ClickStream(Party.BOB, times + offset, bob_ports),
    )


def _stations(alice_stream, bob_stream, cfg=None, offset=0):
    cfg = cfg or ProtocolConfig()
    channel = ClassicalChannel()
    captured = []
    channel.attach_tap(captured.append)
    resolved = resolve_double_clicks(bob_stream, 16, cfg.double_click_policy, np.random.default_rng(1))
    bob = BobStation(channel, resolved, cfg, np.random.default_rng(2))
    alice = AliceStation(channel, alice_stream, CoincidenceWindowConfig(), offset, cfg, np.random.default_rng(3))
    for epoch in range(session_epochs(resolved.timestamps, alice_stream.timestamps + offset)):
        bob.announce_epoch(epoch)
        alice.handle_timing()
        bob.receive_sift_ack(epoch)
    return alice, bob, captured


class TestSift:
    """Tamizado por época."""

    def test_ejemplo_minimo(self):
        """Dos coincidencias en la misma base, una en base distinta."""
        alice = ClickStream(Party.ALICE, [1000, 5000, 9000], [Port.V, Port.PLUS45, Port.H])
        bob = ClickStream(Party.BOB, [1000, 5010, 9005], [Port.H, Port.V, Port.V])
        result = sift(bob, alice, 0, CoincidenceWindowConfig())

        np.testing.assert_array_equal(result.alice_sifted.bits, [1, 0])
        np.testing.assert_array_equal(result.bob_sifted.bits, [1, 0])
        assert len(result.timing_frames) == 1
        ack = parse_payload(result.sift_ack_frames[0])
        np.testing.assert_array_equal(ack.indices, [0, 2])

    def test_timing_no_lleva_bits(self):
        """TIMING solo lleva offset y base: el bit de Bob no es deducible."""
        alice, bob_stream = _correlated_streams(200, 0.0, 4)
        result = sift(bob_stream, alice, 0, CoincidenceWindowConfig())
        timing = parse_payload(result.timing_frames[0])
        assert len(result.timing_frames[0].payload) == 4 + 5 * len(timing)
        np.testing.assert_array_equal(timing.bases, PORT_BASIS[bob_stream.detectors])

        # Invertir todos los bits de Bob dentro de su base no cambia el TIMING
        flipped_ports = np.array([PARTNER[Port(p)] for p in bob_stream.detectors.tolist()], dtype=np.int8)
        flipped = ClickStream(Party.BOB, bob_stream.timestamps, flipped_ports)
        other = sift(flipped, alice, 0, CoincidenceWindowConfig())
        assert other.timing_frames[0].payload == result.timing_frames[0].payload

    def test_con_offset_de_reloj(self):
        alice, bob_stream = _correlated_streams(300, 0.0, 5, offset=7_000)
        result = sift(bob_stream, alice, 7_000, CoincidenceWindowConfig())
        assert len(result.bob_sifted) == 300
        np.testing.assert_array_equal(result.alice_sifted.bits, result.bob_sifted.bits)

    def test_bits_de_alice_invertidos(self):
        alice, bob_stream = _correlated_streams(100, 0.0, 6)
        result = sift(bob_stream, alice, 0, CoincidenceWindowConfig())
        np.testing.assert_array_equal(result.alice_sifted.bits, 1 - PORT_BIT[alice.detectors])

    def test_epocas_vacias_anunciadas(self):
        """Una época sin clics también produce TIMING y SIFT_ACK vacíos."""
        epoch = 1 << 32
        alice = ClickStream(Party.ALICE, [100, 2 * epoch + 100], [Port.V, Port.V])
        bob = ClickStream(Party.BOB, [100, 2 * epoch + 100], [Port.H, Port.H])
        result = sift(bob, alice, 0, CoincidenceWindowConfig())
        assert [f.epoch for f in result.timing_frames] == [0, 1, 2]
        assert len(parse_payload(result.timing_frames[1])) == 0


class TestDoubleClicks:
    """Clics simultáneos en Bob."""

    def test_discard(self):
        group = [ClickRecord(10, Port.V, Party.BOB), ClickRecord(12, Port.H, Party.BOB)]
        assert handle_double_click(group, DoubleClickPolicy.DISCARD, np.random.default_rng(0)) is None

    def test_random_asigna_bit_en_una_de_las_bases(self):
        group = [ClickRecord(10, Port.V, Party.BOB), ClickRecord(12, Port.PLUS45, Party.BOB)]
        resolved = handle_double_click(group, DoubleClickPolicy.RANDOM, np.random.default_rng(0))
        assert resolved.double and resolved.timestamp == 10
        assert resolved.basis in (0, 1) and resolved.bit in (0, 1)

    def test_clic_simple(self):
        resolved = handle_double_click([ClickRecord(5, Port.H, Party.BOB)], DoubleClickPolicy.DISCARD, np.random.default_rng(0))
        assert (resolved.basis, resolved.bit, resolved.double) == (0, 1, False)

    def test_grupo_vacio(self):
        with pytest.raises(ValueError, match="vacío"):
            handle_double_click([], DoubleClickPolicy.DISCARD, np.random.default_rng(0))

    def test_resolve_agrupa_por_ventana(self):
        stream = ClickStream(Party.BOB, [0, 10, 100, 200], [Port.V, Port.H, Port.V, Port.H])
        resolved = resolve_double_clicks(stream, 16, DoubleClickPolicy.DISCARD, np.random.default_rng(0))
        assert resolved.double_clicks == 1
        np.testing.assert_array_equal(resolved.timestamps, [100, 200])
        np.testing.assert_array_equal(resolved.sources, [2, 3])


class TestSiftedKey:
    def test_particion_por_epoca(self, tmp_path):
        key = SiftedKey(Party.BOB)
        key.append(0, [1, 0], [0, 1], [10, 20])
        key.append(1, [], [], [])
        key.append(2, [1], [5], [99])
        assert len(key) == 3
        np.testing.assert_array_equal(key.for_epochs(1, 2), [1])
        assert set(key.epoch_bits()) == {0, 1, 2}
        key.to_ascii(tmp_path / "bob.txt")
        assert (tmp_path / "bob.txt").read_text(encoding="ascii") == "101\n"

    def test_bits_invalidos(self):
        with pytest.raises(ValueError, match="0 o 1"):
            SiftedKey(Party.BOB).append(0, [2], [0], [0])


class TestProcessBlock:
    """QBER, Cascade, verificación y amplificación de un bloque."""

    def test_claves_sin_errores(self):
        """Sin errores solo se anuncian las paridades de la primera pasada: m = n − ⌈n/64⌉ − 100."""
        alice, bob, _ = _stations(*_correlated_streams(4000, 0.0, 7))
        outcome = process_block(alice, bob, 0, 1)

        assert outcome.sifted_length == 4000
        assert outcome.sampled == 200
        assert outcome.q_est == 0.0
        assert outcome.leaked_bits == 60
        assert outcome.final_length == 3800 - 60 - 100
        np.testing.assert_array_equal(alice.final_blocks[0], bob.final_blocks[0])

    def test_claves_con_errores(self):
        """1 % de errores sobre 20 000 bits: Cascade deja claves finales idénticas."""
        alice, bob, _ = _stations(*_correlated_streams(20_000, 0.01, 8))
        outcome = process_block(alice, bob, 0, 1)
        assert not outcome.discarded
        assert 0 < outcome.final_length < outcome.reconciled_length
        np.testing.assert_array_equal(alice.final_blocks[0], bob.final_blocks[0])

    def test_bloque_descartado_por_qber(self):
        alice, bob, _ = _stations(*_correlated_streams(2000, 0.3, 9))
        outcome = process_block(alice, bob, 0, 1)
        assert outcome.discarded
        assert outcome.final_length == 0 and outcome.leaked_bits == 0
        assert bob.final_blocks[0].size == 0

    def test_bloque_pequeno_sin_clave(self):
        alice, bob, _ = _stations(*_correlated_streams(60, 0.0, 10))
        outcome = process_block(alice, bob, 0, 1)
        assert outcome.final_length == 0
        assert not outcome.discarded

    def test_hash_distinto_aborta(self):
        alice, bob, _ = _stations(*_correlated_streams(2000, 0.0, 11))

        def corrupt(key, oracle, passes):
            result = cascade_correct(key, oracle, passes)
            result.corrected[0] ^= 1
            return result

        with patch("app.protocol.cascade_correct", side_effect=corrupt):
            with pytest.raises(ReconciliationFailure, match="no coincide"):
                process_block(alice, bob, 0, 1)

    def test_frames_del_bloque(self):
        """BLOCK_START abre y PA_SEED cierra; ningún frame lleva bits tamizados salvo la muestra."""
        alice, bob, captured = _stations(*_correlated_streams(1000, 0.0, 12))
        start = len(captured)
        process_block(alice, bob, 0, 1)
        types = [c.frame.type for c in captured[start:]]
        assert types[0] is FrameType.SESSION_CTL
        assert types[-1] is FrameType.PA_SEED
        assert FrameType.TIMING not in types


class TestStations:
    def test_sift_ack_fuera_de_rango(self):
        _, bob_stream = _correlated_streams(10, 0.0, 13)
        channel = ClassicalChannel()
        cfg = ProtocolConfig()
        resolved = resolve_double_clicks(bob_stream, 16, cfg.double_click_policy, np.random.default_rng(0))
        bob = BobStation(channel, resolved, cfg, np.random.default_rng(0))
        bob.announce_epoch(0)
        channel.receive(Direction.BOB_TO_ALICE)

        channel.send(Direction.ALICE_TO_BOB, make_frame(0, SiftAckPayload([50])))
        with pytest.raises(ProtocolError, match="fuera del TIMING"):
            bob.receive_sift_ack(0)

    def test_alice_espera_timing(self):
        alice_stream, _ = _correlated_streams(10, 0.0, 14)
        channel = ClassicalChannel()
        alice = AliceStation(
            channel, alice_stream, CoincidenceWindowConfig(), 0, ProtocolConfig(), np.random.default_rng(0)
        )
        channel.send(Direction.BOB_TO_ALICE, make_frame(0, SiftAckPayload([])))
        with pytest.raises(ProtocolError, match="TIMING"):
            alice.handle_timing()
