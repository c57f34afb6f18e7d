"""Tests del ataque de cegado con estados falsos (app.eve)."""

from unittest.mock import patch

import numpy as np
import pytest

from app.config import (
    DEFAULT_THRESHOLD_PROFILE,
    BlindingConfig,
    CoincidenceWindowConfig,
    DetectorConfig,
    FsgConfig,
    PrepulseConfig,
    ProtocolConfig,
)
from app.detector import ApdMode, ThresholdProfile, build_detectors
from app.errors import CalibrationError, ConfigurationError, ExtractionAbort, ProtocolError
from app.eve import (
    FakedStateGenerator,
    FidelityMatrix,
    Interceptor,
    Photon,
    WiretapLog,
    _split_blocks,
    apply_faked_state,
    calibrate,
    extract_key,
    intercept,
    replay_block,
    run_blinding,
)
from app.photonics import PORT_POLARIZATION, Port
from app.protocol import (
    AliceStation,
    BobStation,
    process_block,
    resolve_double_clicks,
    session_epochs,
)
from app.timebase import TICKS_PER_NS, ClickRecord, ClickStream, Party
from app.transport import ClassicalChannel

PARTNER = {Port.V: Port.H, Port.H: Port.V, Port.PLUS45: Port.MINUS45, Port.MINUS45: Port.PLUS45}


@pytest.fixture
def profile():
    return ThresholdProfile.load(DEFAULT_THRESHOLD_PROFILE)


@pytest.fixture
def bob(profile):
    return build_detectors(DetectorConfig(), Party.BOB, profile)


@pytest.fixture
def eve(profile):
    return build_detectors(DetectorConfig(), Party.EVE, profile)


@pytest.fixture
def blinded_bob(bob):
    run_blinding(bob, FsgConfig())
    return bob


@pytest.fixture
def generator(blinded_bob):
    return FakedStateGenerator(FsgConfig(), [d.profile for d in blinded_bob])


def _random_streams(n, error_rate, seed):
    """Clics de Alice y Bob con separaciones aleatorias (sin alias en la sincronización)."""
    rng = np.random.default_rng(seed)
    times = 1000 + np.cumsum(rng.integers(2_000, 40_000, n)).astype(np.int64)
    alice_ports = rng.integers(0, 4, n).astype(np.int8)
    bob_ports = np.array([PARTNER[Port(p)] for p in alice_ports.tolist()], dtype=np.int8)
    flips = rng.random(n) < error_rate
    bob_ports[flips] = alice_ports[flips]
    return ClickStream(Party.ALICE, times, alice_ports), ClickStream(Party.BOB, times, bob_ports)


def _session(alice_stream, bob_stream, cfg=None):
    """Tamizado y un único bloque de procesamiento, con escucha del canal."""
    cfg = cfg or ProtocolConfig()
    channel = ClassicalChannel()
    wiretap = WiretapLog()
    channel.attach_tap(wiretap.capture)
    resolved = resolve_double_clicks(bob_stream, 16, cfg.double_click_policy, np.random.default_rng(1))
    bob = BobStation(channel, resolved, cfg, np.random.default_rng(2))
    alice = AliceStation(channel, alice_stream, CoincidenceWindowConfig(), 0, cfg, np.random.default_rng(3))
    n_epochs = session_epochs(resolved.timestamps, alice_stream.timestamps)
    for epoch in range(n_epochs):
        bob.announce_epoch(epoch)
        alice.handle_timing()
        bob.receive_sift_ack(epoch)
    process_block(alice, bob, 0, n_epochs)
    return alice, bob, wiretap


class TestIntercept:
    """Réplica del receptor de Bob en manos de Eve."""

    def test_clic_en_el_puerto_dado(self, eve):
        photon = Photon(10_000, PORT_POLARIZATION[Port.H])
        port, click = intercept(photon, eve, np.random.default_rng(0), port=Port.H, u=0.0)
        assert port is Port.H
        assert click.detector == Port.H and click.party is Party.EVE

    def test_foton_perdido_por_eficiencia(self, eve):
        photon = Photon(10_000, PORT_POLARIZATION[Port.V])
        assert intercept(photon, eve, np.random.default_rng(0), port=Port.V, u=0.99) is None

    def test_eve_cegada(self, eve):
        run_blinding(eve, FsgConfig())
        with pytest.raises(ValueError, match="Geiger"):
            intercept(Photon(0, PORT_POLARIZATION[Port.V]), eve, np.random.default_rng(0))

    def test_separacion_minima_entre_clics_registrados(self, eve):
        interceptor = Interceptor(eve, min_spacing_ns=550.0)
        rng = np.random.default_rng(1)
        first = interceptor.intercept(Photon(10_000, PORT_POLARIZATION[Port.V]), rng, port=Port.V, u=0.0)
        second = interceptor.intercept(
            Photon(10_000 + 100 * TICKS_PER_NS, PORT_POLARIZATION[Port.H]), rng, port=Port.H, u=0.0
        )
        assert first is not None and second is None
        assert (interceptor.registered, interceptor.suppressed) == (1, 1)

        third = interceptor.intercept(
            Photon(10_000 + 5_000 * TICKS_PER_NS, PORT_POLARIZATION[Port.PLUS45]), rng, port=Port.PLUS45, u=0.0
        )
        assert third is not None
        assert interceptor.registered == 2

    def test_cuenta_oscura_arma_el_fsg(self, eve):
        interceptor = Interceptor(eve, min_spacing_ns=550.0)
        assert interceptor.admit_dark_count(ClickRecord(1000, Port.V, Party.EVE))
        assert not interceptor.admit_dark_count(ClickRecord(1100, Port.H, Party.EVE))


class TestBlinding:
    """Láser c.w. de cegado sobre Bob."""

    def test_cegado_completo_por_defecto(self, bob):
        assert run_blinding(bob, FsgConfig()) == []
        assert all(d.mode is ApdMode.BLINDED for d in bob)
        assert bob[0].cw_power_at_diode == pytest.approx(152e-12)

    def test_potencia_insuficiente_estricto(self, bob):
        cfg = FsgConfig(blinding=BlindingConfig(power_w=100e-12))
        with pytest.raises(ConfigurationError, match="insuficiente"):
            run_blinding(bob, cfg)

    def test_potencia_insuficiente_tolerante(self, bob):
        cfg = FsgConfig(blinding=BlindingConfig(power_w=100e-12))
        assert run_blinding(bob, cfg, strict=False) == list(Port)

    def test_polarizacion_lineal_deja_un_puerto_en_geiger(self, bob):
        """Luz H no llega al puerto V."""
        cfg = FsgConfig(blinding=BlindingConfig(polarization=(1.0, 0.0, 0.0)))
        assert run_blinding(bob, cfg, strict=False) == [Port.V]


class TestFakedStateGenerator:
    def test_requiere_cuatro_tablas(self, profile):
        with pytest.raises(ValueError, match="4 detectores"):
            FakedStateGenerator(FsgConfig(), [profile])

    def test_latencia_y_prepulso(self, generator):
        fake = generator.synthesize_faked_state(Port.H, 1000)
        assert fake.target is Port.H
        assert fake.arrival_time == 1000 + 212 * TICKS_PER_NS
        assert fake.prepulse_time == fake.arrival_time - 100 * TICKS_PER_NS
        assert generator.sent == 1

    def test_objetivo_recibe_p_always(self, generator, blinded_bob):
        """El objetivo recibe p_always, el ortogonal nada y la base conjugada la mitad."""
        fake = generator.synthesize_faked_state(Port.V, 0)
        _, p_always = blinded_bob[Port.V].profile.thresholds(float(fake.cw_at_port[Port.V]))
        assert fake.peak_at_port[Port.V] == pytest.approx(p_always)
        assert fake.peak_at_port[Port.H] == pytest.approx(0.0)
        assert fake.peak_at_port[Port.PLUS45] == pytest.approx(p_always / 2)

    def test_prepulso_ortogonal_sube_la_cw_fuera_del_objetivo(self, generator):
        cw = generator.prepulse_cw(Port.H)
        assert cw[Port.H] == pytest.approx(0.0)
        assert cw[Port.V] == pytest.approx(200e-6)

    def test_sin_prepulso(self, blinded_bob):
        cfg = FsgConfig(prepulse=PrepulseConfig(enabled=False))
        generator = FakedStateGenerator(cfg, [d.profile for d in blinded_bob])
        assert generator.synthesize_faked_state(Port.V, 0).prepulse_time is None
        assert not generator.prepulse_cw(Port.V).any()


class TestApplyFakedState:
    def test_bob_cegado_hace_clic_solo_en_el_objetivo(self, generator, blinded_bob):
        rng = np.random.default_rng(3)
        for target in Port:
            fake = generator.synthesize_faked_state(target, (target + 1) * 100_000)
            clicks = apply_faked_state(fake, blinded_bob, rng)
            assert [c.detector for c in clicks] == [target]
        assert all(d.mode is ApdMode.BLINDED for d in blinded_bob)

    def test_bob_en_geiger_hace_clic_con_cualquier_pulso(self, generator, profile):
        geiger = build_detectors(DetectorConfig(), Party.BOB, profile)
        fake = generator.synthesize_faked_state(Port.H, 0)
        clicks = apply_faked_state(fake, geiger, np.random.default_rng(4))
        assert sorted(c.detector for c in clicks) == [Port.MINUS45, Port.H, Port.PLUS45]


class TestFidelityMatrix:
    def test_registro(self):
        fidelity = FidelityMatrix()
        fidelity.record(0, [0])
        fidelity.record(0, [])
        fidelity.record(1, [1, 2])
        fidelity.record(2, [3])

        assert fidelity.total_sent == 4
        assert fidelity.off_diagonal == 1
        assert fidelity.total_double_clicks == 1
        assert fidelity.diagonal_fractions() == [0.5, 0.0, 0.0, None]
        data = fidelity.to_dict()
        assert data["no_clicks"] == [1, 0, 0, 0]
        assert data["double_click_rate"] == 0.25


class TestCalibrate:
    """Barrido de diagnóstico del FSG."""

    def test_diagonal_completa_con_la_configuracion_por_defecto(self, generator, blinded_bob):
        report = calibrate(generator, blinded_bob, np.random.default_rng(5), pulses_per_port=500)
        assert report.fidelity.diagonal_fractions() == [1.0, 1.0, 1.0, 1.0]
        assert report.fidelity.total_double_clicks == 0
        assert report.spread_ticks <= 1
        assert (report.trims_ticks >= 0).all()

    def test_sin_recorte(self, generator, blinded_bob):
        report = calibrate(generator, blinded_bob, np.random.default_rng(6), pulses_per_port=50, trim=False)
        assert not report.trims_ticks.any()
        assert not generator.trim_ticks.any()

    def test_requiere_bob_cegado(self, generator, profile):
        geiger = build_detectors(DetectorConfig(), Party.BOB, profile)
        with pytest.raises(ValueError, match="cegado"):
            calibrate(generator, geiger, np.random.default_rng(0), pulses_per_port=1)

    def test_clics_fuera_de_la_diagonal(self, generator, blinded_bob):
        wrong = [ClickRecord(0, Port.V, Party.BOB)]
        with patch("app.eve.apply_faked_state", return_value=wrong):
            with pytest.raises(CalibrationError, match="fuera de la diagonal"):
                calibrate(generator, blinded_bob, np.random.default_rng(0), pulses_per_port=2)


class TestReplayBlock:
    """Réplica del procesamiento de Bob a partir de la transcripción pública."""

    def test_con_la_clave_de_bob_reproduce_la_final(self):
        alice, bob, wiretap = _session(*_random_streams(6000, 0.03, 20))
        block = _split_blocks(wiretap.decoded())[0]
        replay = replay_block(bob.sifted.bits, block)
        assert replay.verified
        np.testing.assert_array_equal(replay.final, bob.final_blocks[0])

    def test_bloque_descartado(self):
        _, bob, wiretap = _session(*_random_streams(2000, 0.3, 21))
        replay = replay_block(bob.sifted.bits, _split_blocks(wiretap.decoded())[0])
        assert replay.verified
        assert replay.final.size == 0

    def test_clave_distinta_no_verifica(self):
        _, bob, wiretap = _session(*_random_streams(6000, 0.03, 22))
        block = _split_blocks(wiretap.decoded())[0]
        other = bob.sifted.bits.copy()
        other[::7] ^= 1
        try:
            replay = replay_block(other, block)
        except ProtocolError:
            return
        assert not replay.verified

    def test_transcripcion_incompleta(self):
        _, bob, wiretap = _session(*_random_streams(1000, 0.0, 23))
        block = _split_blocks(wiretap.decoded())[0]
        with pytest.raises(ProtocolError, match="incompleta"):
            replay_block(bob.sifted.bits, block[:1])


class TestExtractKey:
    """Clave de Eve a partir de sus clics y del canal clásico."""

    def test_eve_con_los_clics_de_bob_obtiene_su_clave(self):
        """Clics de Eve idénticos a los de Bob, 3000 ticks antes."""
        alice_stream, bob_stream = _random_streams(4000, 0.03, 30)
        _, bob, wiretap = _session(alice_stream, bob_stream)
        eve_clicks = ClickStream(Party.EVE, bob_stream.timestamps - 3000, bob_stream.detectors)

        result = extract_key(wiretap, eve_clicks)

        assert result.sync_offset == 3000
        assert result.unmapped == 0
        assert result.confirmations == len(bob.sifted)
        np.testing.assert_array_equal(result.eve_sifted.bits, bob.sifted.bits)
        assert result.verified_blocks == 1 and result.failed_blocks == []
        np.testing.assert_array_equal(result.final_key(), bob.final_blocks[0])

    def test_usa_los_clics_del_log_por_defecto(self):
        alice_stream, bob_stream = _random_streams(3000, 0.0, 31)
        _, bob, wiretap = _session(alice_stream, bob_stream)
        wiretap.eve_clicks = ClickStream(Party.EVE, bob_stream.timestamps, bob_stream.detectors)
        result = extract_key(wiretap)
        assert result.sync_offset == 0
        np.testing.assert_array_equal(result.eve_sifted.bits, bob.sifted.bits)

    def test_demasiadas_confirmaciones_sin_origen(self):
        alice_stream, bob_stream = _random_streams(4000, 0.0, 32)
        _, _, wiretap = _session(alice_stream, bob_stream)
        half = len(bob_stream) // 2
        eve_clicks = ClickStream(Party.EVE, bob_stream.timestamps[:half], bob_stream.detectors[:half])
        with pytest.raises(ExtractionAbort, match="sin clic de Eve"):
            extract_key(wiretap, eve_clicks)

    def test_sin_correlacion(self):
        alice_stream, bob_stream = _random_streams(2000, 0.0, 33)
        _, _, wiretap = _session(alice_stream, bob_stream)
        rng = np.random.default_rng(34)
        noise = np.sort(rng.integers(0, int(bob_stream.timestamps[-1]), 50)).astype(np.int64)
        eve_clicks = ClickStream(Party.EVE, noise, rng.integers(0, 4, 50).astype(np.int8))
        with pytest.raises(ExtractionAbort):
            extract_key(wiretap, eve_clicks)
