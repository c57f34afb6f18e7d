"""Tests de la línea de comandos (app.cli)."""

import json
from unittest.mock import MagicMock, patch

import pytest

from app.cli import (
    EXIT_CONFIG,
    EXIT_EXTRACTION_ABORT,
    EXIT_OK,
    EXIT_SESSION_ABORT,
    EXIT_STORAGE,
    main,
)
from app.config import Scenario
from app.errors import CalibrationError, ExtractionAbort
from app.report import EXTRACTION_DIR, SessionReport


def _report(completed=True):
    return SessionReport(
        scenario=Scenario.NO_EVE,
        rng_seed=5,
        duration_s=1.0,
        completed=completed,
        abort_reason=None if completed else "hash de verificación no coincide",
    )


class TestRun:
    """Subcomando run."""

    def test_exito(self, tmp_path, capsys):
        with patch("app.session.run_session", return_value=_report()) as run:
            code = main(["run", "--seed", "5", "--duration", "1", "--out", str(tmp_path)])

        assert code == EXIT_OK
        cfg = run.call_args.args[0]
        assert cfg.rng_seed == 5
        assert cfg.duration_s == 1.0
        assert cfg.output_dir == tmp_path
        assert json.loads(capsys.readouterr().out)["rng_seed"] == 5

    def test_sesion_abortada(self, tmp_path):
        with patch("app.session.run_session", return_value=_report(completed=False)):
            assert main(["run", "--seed", "5", "--out", str(tmp_path)]) == EXIT_SESSION_ABORT

    def test_calibracion_fallida(self, tmp_path):
        with patch("app.session.run_session", side_effect=CalibrationError("3 clics fuera de la diagonal")):
            assert main(["run", "--seed", "5", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_archivo_de_configuracion_inexistente(self, tmp_path):
        code = main(["run", "--seed", "5", "--config", str(tmp_path / "no.env")])
        assert code == EXIT_CONFIG

    def test_semilla_obligatoria(self):
        with pytest.raises(SystemExit) as exc:
            main(["run"])
        assert exc.value.code == 2


class TestOfflineCommands:
    """Subcomandos que leen sesiones persistidas."""

    def test_analyze_sin_sesion(self, tmp_path):
        assert main(["analyze", "--session", str(tmp_path)]) == EXIT_STORAGE

    def test_histogram_sin_eventos(self, tmp_path):
        assert main(["histogram", "--session", str(tmp_path)]) == EXIT_STORAGE

    def test_extract_abortada(self, tmp_path):
        args = ["extract", "--alice", "a", "--bob", "b", "--eve", "e", "--out", str(tmp_path)]
        with patch("app.report.extract_offline", side_effect=ExtractionAbort("sin correlación")):
            assert main(args) == EXIT_EXTRACTION_ABORT

    def test_extract_sin_out_usa_la_carpeta_de_la_sesion(self, tmp_path):
        session = tmp_path / "sesion"
        args = [
            "extract",
            "--alice", str(session / "alice-receivefiles"),
            "--bob", str(session / "bob-receivefiles"),
            "--eve", str(session / "eve-raw-events"),
        ]
        with patch("app.report.extract_offline", return_value=MagicMock()) as extract:
            assert main(args) == EXIT_OK
        assert extract.call_args.args[3] == session / EXTRACTION_DIR

    def test_extract_con_out_explicito(self, tmp_path):
        args = ["extract", "--alice", "a", "--bob", "b", "--eve", "e", "--out", str(tmp_path)]
        with patch("app.report.extract_offline", return_value=MagicMock()) as extract:
            assert main(args) == EXIT_OK
        assert extract.call_args.args[3] == tmp_path
