"""API HTTP local para lanzar y consultar sesiones simuladas."""

import asyncio
import logging
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field, ValidationError

from app.config import get_settings, load_session_config
from app.errors import (
    CalibrationError,
    ConfigurationError,
    ExtractionAbort,
    StorageError,
    SynchronizationError,
)
from app.report import (
    ALICE_RECEIVE_DIR,
    BOB_RECEIVE_DIR,
    EVE_RAW_DIR,
    EXTRACTION_DIR,
    FINAL_KEYS_DIR,
    HISTOGRAM_FILE,
    SIFTED_DIR,
    analyze,
    extract_offline,
    histogram,
)
from app.session import run_session

# Configurar logging
logging.basicConfig(
    level=get_settings().log_level.upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="QKD Blinding Simulator",
    description="Simulador determinista de un enlace BBM92 bajo ataque de cegado de detectores",
    version="0.1.0",
)

settings = get_settings()


class SessionRequest(BaseModel):
    seed: int = Field(..., ge=0, lt=2**64, description="Semilla obligatoria")
    name: Optional[str] = Field(
        default=None, pattern=r"^[A-Za-z0-9_.-]+$", description="Nombre del directorio de salida"
    )
    config_path: Optional[str] = Field(default=None, description="Archivo clave=valor de la sesión")
    overrides: dict[str, Any] = Field(default_factory=dict, description="Valores que pisan el archivo")


def _session_dir(name: str) -> Path:
    return Path(settings.data_dir) / name


def _error(status_code: int, message: str) -> JSONResponse:
    return JSONResponse(content={"ok": False, "error": message}, status_code=status_code)


@app.get("/")
async def root() -> dict[str, str]:
    """Endpoint raíz."""
    return {
        "message": "QKD Blinding Simulator API",
        "version": "0.1.0",
        "status": "running",
        "environment": settings.environment,
    }


@app.get("/health")
async def health_check() -> dict[str, str]:
    """Endpoint de salud para verificar que el servidor está vivo."""
    return {"status": "ok", "message": "Servidor funcionando correctamente"}


@app.post("/sessions")
async def create_session(request: SessionRequest) -> JSONResponse:
    """Ejecuta una sesión completa en un hilo y devuelve su informe."""
    path = Path(request.config_path) if request.config_path else settings.default_config_path
    try:
        cfg = load_session_config(path, **{**request.overrides, "rng_seed": request.seed})
        name = request.name or f"{cfg.scenario.value.lower()}-{cfg.rng_seed}"
        cfg = cfg.model_copy(update={"output_dir": _session_dir(name)})
        report = await asyncio.to_thread(run_session, cfg)
    except (ConfigurationError, ValidationError, CalibrationError) as e:
        logger.error(f"Sesión rechazada: {e}", exc_info=True)
        return _error(422, str(e))

    logger.info(f"Sesión {name} terminada: completada={report.completed}")
    return JSONResponse(
        content={"ok": True, "name": name, "report": report.model_dump(mode="json", exclude={"rates"})}
    )


@app.get("/sessions/{name}/report")
async def session_report(name: str) -> JSONResponse:
    """Informe recalculado desde los archivos de la sesión."""
    try:
        report = await asyncio.to_thread(analyze, _session_dir(name))
    except StorageError as e:
        return _error(404, str(e))
    return JSONResponse(content={"ok": True, "report": report.model_dump(mode="json")})


@app.get("/sessions/{name}/histogram")
async def session_histogram(name: str) -> Response:
    """CSV de histogramas de coincidencias por combinación de detectores."""
    session_dir = _session_dir(name)
    try:
        await asyncio.to_thread(histogram, session_dir)
    except StorageError as e:
        return _error(404, str(e))
    except SynchronizationError as e:
        return _error(409, str(e))
    return PlainTextResponse((session_dir / HISTOGRAM_FILE).read_text(encoding="utf-8"), media_type="text/csv")


@app.post("/sessions/{name}/extract")
async def session_extract(name: str) -> JSONResponse:
    """Extracción de Eve a partir de la transcripción y sus clics persistidos."""
    session_dir = _session_dir(name)
    eve_dir = session_dir / EVE_RAW_DIR
    if not eve_dir.is_dir():
        return _error(404, f"La sesión {name} no tiene eventos de Eve")
    try:
        summary = await asyncio.to_thread(
            extract_offline,
            session_dir / ALICE_RECEIVE_DIR,
            session_dir / BOB_RECEIVE_DIR,
            eve_dir,
            session_dir / EXTRACTION_DIR,
            bob_sifted_dir=session_dir / SIFTED_DIR / "bob",
            bob_final_dir=session_dir / FINAL_KEYS_DIR / "bob",
        )
    except ExtractionAbort as e:
        logger.error(f"Extracción abortada en {name}: {e}", exc_info=True)
        return _error(409, str(e))
    except StorageError as e:
        return _error(404, str(e))
    return JSONResponse(content={"ok": True, "extraction": summary.model_dump(mode="json")})
