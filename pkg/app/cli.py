"""Línea de comandos del simulador.

Subcomandos: ``run``, ``extract``, ``analyze``, ``histogram`` y ``serve``.
Códigos de salida: 0 éxito, 1 error de archivos, 2 sesión abortada,
3 extracción abortada, 4 configuración inválida.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from app.config import get_settings, load_session_config
from app.errors import (
    CalibrationError,
    ConfigurationError,
    ExtractionAbort,
    StorageError,
    SynchronizationError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STORAGE = 1
EXIT_SESSION_ABORT = 2
EXIT_EXTRACTION_ABORT = 3
EXIT_CONFIG = 4

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkd-sim", description="Simulador de un enlace BBM92 bajo ataque de cegado"
    )
    parser.add_argument("--log-level", default=None, help="Nivel de logging (por defecto, el de Settings)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Ejecuta una sesión completa")
    run.add_argument("--config", type=Path, default=None, help="Archivo clave=valor de la sesión")
    run.add_argument("--seed", type=int, required=True, help="Semilla de la sesión")
    run.add_argument("--out", type=Path, default=None, help="Directorio de salida")
    run.add_argument("--duration", type=float, default=None, help="Duración simulada (s)")

    extract = sub.add_parser("extract", help="Extracción de la clave de Bob por Eve")
    extract.add_argument("--alice", type=Path, required=True, help="alice-receivefiles")
    extract.add_argument("--bob", type=Path, required=True, help="bob-receivefiles")
    extract.add_argument("--eve", type=Path, required=True, help="eve-raw-events")
    extract.add_argument(
        "--out",
        type=Path,
        default=None,
        help="Directorio de resultados (por defecto data-produced-by-scripts junto a --eve)",
    )
    extract.add_argument("--bob-sifted", type=Path, default=None, help="Claves tamizadas de Bob")
    extract.add_argument("--bob-final", type=Path, default=None, help="Claves finales de Bob")

    analyze = sub.add_parser("analyze", help="Recalcula el informe de una sesión persistida")
    analyze.add_argument("--session", type=Path, required=True)

    histogram = sub.add_parser("histogram", help="Histogramas de coincidencias (CSV)")
    histogram.add_argument("--session", type=Path, required=True)

    serve = sub.add_parser("serve", help="Levanta la API HTTP")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    from app.session import run_session

    settings = get_settings()
    path = args.config if args.config is not None else settings.default_config_path
    overrides = {"rng_seed": args.seed}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    cfg = load_session_config(path, **overrides)
    out = args.out or settings.data_dir / f"{cfg.scenario.value.lower()}-{cfg.rng_seed}"
    cfg = cfg.model_copy(update={"output_dir": out})

    report = run_session(cfg)
    print(report.model_dump_json(indent=2, exclude={"rates"}))
    if not report.completed:
        logger.error(f"Sesión abortada: {report.abort_reason}")
        return EXIT_SESSION_ABORT
    return EXIT_OK


def _cmd_extract(args: argparse.Namespace) -> int:
    from app.report import EXTRACTION_DIR, extract_offline

    out = args.out if args.out is not None else args.eve.parent / EXTRACTION_DIR
    summary = extract_offline(
        args.alice,
        args.bob,
        args.eve,
        out,
        bob_sifted_dir=args.bob_sifted,
        bob_final_dir=args.bob_final,
    )
    print(summary.model_dump_json(indent=2))
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    from app.report import analyze

    report = analyze(args.session)
    print(report.model_dump_json(indent=2, exclude={"rates"}))
    return EXIT_OK if report.completed else EXIT_SESSION_ABORT


def _cmd_histogram(args: argparse.Namespace) -> int:
    from app.report import HISTOGRAM_FILE, histogram

    result = histogram(args.session)
    print(f"{result.total} coincidencias; FWHM medio {result.mean_fwhm_ps()} ps")
    print(args.session / HISTOGRAM_FILE)
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run(
        "app.main:app",
        host=args.host or settings.host,
        port=args.port or settings.port,
        log_level=settings.log_level.lower(),
    )
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "extract": _cmd_extract,
    "analyze": _cmd_analyze,
    "histogram": _cmd_histogram,
    "serve": _cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level or get_settings().log_level
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT)

    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValidationError, CalibrationError) as e:
        logger.error(f"Configuración inválida: {e}", exc_info=True)
        return EXIT_CONFIG
    except ExtractionAbort as e:
        logger.error(f"Extracción abortada: {e}", exc_info=True)
        return EXIT_EXTRACTION_ABORT
    except (StorageError, SynchronizationError, FileNotFoundError) as e:
        logger.error(f"No se pudo leer la sesión: {e}", exc_info=True)
        return EXIT_STORAGE


if __name__ == "__main__":
    sys.exit(main())
