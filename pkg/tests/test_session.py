"""Tests de sesiones cortas completas (app.session)."""

import pytest

from app.config import CONFIG_DIR, Scenario, load_session_config
from app.errors import ConfigurationError
from app.report import (
    ALICE_RAW_DIR,
    ALICE_RECEIVE_DIR,
    BOB_RAW_DIR,
    BOB_RECEIVE_DIR,
    CONFIG_FILE,
    EVE_RAW_DIR,
    FINAL_KEYS_DIR,
    HISTOGRAM_FILE,
    REPORT_FILE,
    SIFTED_DIR,
    analyze,
    load_report,
)
from app.session import QkdSession, run_session


def _config(tmp_path, name="default.env", seed=11, duration=1.0, **overrides):
    return load_session_config(
        CONFIG_DIR / name, rng_seed=seed, duration_s=duration, output_dir=tmp_path, **overrides
    )


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def no_eve_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("no_eve")
    run_session(_config(out))
    return out


@pytest.fixture(scope="module")
def eve_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("eve")
    run_session(_config(out, "eve_faked_state.env"))
    return out


class TestNoEve:
    """Sesión sin espía."""

    def test_estructura_de_salida(self, no_eve_dir):
        for name in (ALICE_RAW_DIR, BOB_RAW_DIR, ALICE_RECEIVE_DIR, BOB_RECEIVE_DIR, FINAL_KEYS_DIR, SIFTED_DIR):
            assert (no_eve_dir / name).is_dir(), name
        for name in (REPORT_FILE, CONFIG_FILE, HISTOGRAM_FILE):
            assert (no_eve_dir / name).is_file(), name
        assert not (no_eve_dir / EVE_RAW_DIR).exists()

    def test_informe(self, no_eve_dir):
        report = load_report(no_eve_dir)
        assert report.scenario is Scenario.NO_EVE
        assert report.completed
        assert report.eve is None
        assert report.sync_offset_ticks is not None
        assert 0 < report.sifted_length <= report.coincidences <= report.raw_clicks["bob"]
        assert report.final_length <= report.sifted_length
        assert 0.02 < report.qber_sifted < 0.11
        assert report.verdicts.alice_equals_bob is True

    def test_tasas_por_bin(self, no_eve_dir):
        rates = load_report(no_eve_dir).rates
        assert len(rates.raw) == 1
        assert rates.final[0] <= rates.sifted[0] <= rates.raw[0]

    def test_analisis_coincide_con_el_informe(self, no_eve_dir):
        original = load_report(no_eve_dir)
        report = analyze(no_eve_dir)
        assert report.sifted_length == original.sifted_length
        assert report.final_length == original.final_length
        assert report.verdicts.alice_equals_bob is True


class TestDeterminism:
    """Misma semilla, mismos bytes."""

    def test_salida_identica_con_la_misma_semilla(self, tmp_path, no_eve_dir):
        run_session(_config(tmp_path))
        assert _tree(tmp_path) == _tree(no_eve_dir)

    def test_otra_semilla_cambia_los_eventos(self, tmp_path):
        a = run_session(_config(tmp_path / "a", seed=1), persist=False)
        b = run_session(_config(tmp_path / "b", seed=2), persist=False)
        assert a.raw_clicks != b.raw_clicks or a.sifted_length != b.sifted_length

    def test_sin_persistencia_no_escribe(self, tmp_path):
        run_session(_config(tmp_path / "nada"), persist=False)
        assert not (tmp_path / "nada").exists()


class TestFakedStateAttack:
    """Sesión con Eve cegando a Bob."""

    def test_eve_persistida(self, eve_dir):
        assert (eve_dir / EVE_RAW_DIR).is_dir()
        assert (eve_dir / FINAL_KEYS_DIR / "eve").is_dir()

    def test_calibracion_en_la_diagonal(self, eve_dir):
        calibration = load_report(eve_dir).eve.calibration
        assert calibration.fidelity.diagonal_fractions == [1.0, 1.0, 1.0, 1.0]
        assert calibration.fidelity.off_diagonal == 0

    def test_eve_conoce_la_clave_de_bob(self, eve_dir):
        report = load_report(eve_dir)
        assert report.completed
        assert report.eve.extraction_error is None
        assert report.eve.unmapped == 0
        assert report.eve.sifted_length == report.sifted_length
        assert report.verdicts.eve_equals_bob_sifted is True
        assert report.verdicts.alice_equals_bob is True

    def test_un_estado_falso_por_clic_registrado(self, eve_dir):
        eve = load_report(eve_dir).eve
        assert eve.clicks == eve.registered == eve.faked_states
        assert eve.resent_photons == 0


class TestEveConfiguration:
    def test_cegado_insuficiente(self, tmp_path):
        cfg = _config(tmp_path, "eve_faked_state.env", eve={"fsg": {"blinding": {"power_w": 50e-12}}})
        with pytest.raises(ConfigurationError, match="insuficiente"):
            QkdSession(cfg).run(persist=False)

    def test_intercepcion_reenvio_sin_cegado(self, tmp_path):
        report = run_session(_config(tmp_path, "intercept_resend.env"), persist=False)
        assert report.eve.faked_states == 0
        assert report.eve.resent_photons > 0
        assert report.eve.calibration is None


class TestCountermeasure:
    """Fotones de prueba en modo Geiger inyectados en Bob."""

    OVERRIDE = {"countermeasure": {"test_photon_rate_hz": 2000.0}}

    def test_sin_eve_no_alarma(self, tmp_path):
        report = run_session(_config(tmp_path, **self.OVERRIDE), persist=False)
        summary = report.countermeasure
        assert summary.sent > 1000
        assert summary.expected == pytest.approx(0.5 * summary.sent)
        assert summary.detected > 0.5 * summary.expected
        assert summary.attack_detected is False

    def test_bob_cegado_delata_el_ataque(self, tmp_path):
        report = run_session(_config(tmp_path, "eve_faked_state.env", **self.OVERRIDE), persist=False)
        summary = report.countermeasure
        assert summary.sent > 1000
        assert summary.detected == 0
        assert summary.attack_detected is True

    def test_desactivada_por_defecto(self, tmp_path):
        report = run_session(_config(tmp_path), persist=False)
        assert report.countermeasure is None


class TestEllipticalSession:
    def test_sesion_corta_con_cegado_eliptico(self, tmp_path):
        report = run_session(_config(tmp_path, "eve_elliptical.env"), persist=False)
        assert report.completed
        assert report.scenario is Scenario.EVE_ELLIPTICAL
        assert report.eve.calibration.fidelity.diagonal_fractions == [1.0, 1.0, 1.0, 1.0]
        assert report.eve.faked_states > 0
        assert report.eve.fidelity.off_diagonal == 0
