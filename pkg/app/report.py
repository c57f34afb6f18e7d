"""Informe de sesión: tasas, serie de QBER, histogramas y veredictos.

El informe se serializa como ``report.json`` (pydantic) junto a ``rates.csv``
y ``qber.csv``. ``analyze`` y ``histogram`` recalculan a partir de los
archivos persistidos, sin volver a simular.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.config import CoincidenceWindowConfig, Scenario
from app.errors import StorageError
from app.eve import WiretapLog, extract_key
from app.protocol import ASCII_LINE_BITS, bits_to_ascii
from app.storage import StoredKey, merge_transcript, read_clicks, read_key_directory, write_key
from app.timebase import TICKS_PER_SECOND, ClickStream, Party
from app.timetag import CoincidenceHistogram, build_histogram, match_coincidences, synchronize

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
CONFIG_FILE = "config.json"
RATES_FILE = "rates.csv"
QBER_FILE = "qber.csv"
HISTOGRAM_FILE = "histogram.csv"

ALICE_RAW_DIR = "alice-raw-events"
BOB_RAW_DIR = "bob-raw-events"
EVE_RAW_DIR = "eve-raw-events"
ALICE_RECEIVE_DIR = "alice-receivefiles"
BOB_RECEIVE_DIR = "bob-receivefiles"
FINAL_KEYS_DIR = "finalkeys"
SIFTED_DIR = "sifted"
EXTRACTION_DIR = "data-produced-by-scripts"


# ==================== MODELOS ====================


class RateSeries(BaseModel):
    """Tasas por bin de tiempo (cuentas por segundo)."""

    bin_s: float
    time_s: list[float] = Field(default_factory=list)
    raw: list[float] = Field(default_factory=list)
    sifted: list[float] = Field(default_factory=list)
    final: list[float] = Field(default_factory=list)

    def mean(self, name: str) -> float:
        values = getattr(self, name)
        return float(np.mean(values)) if values else 0.0

    def to_csv(self, path: Path) -> None:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["time_s", "raw_cps", "sifted_bps", "final_bps"])
            for row in zip(self.time_s, self.raw, self.sifted, self.final):
                writer.writerow([f"{v:.6g}" for v in row])


class QberPoint(BaseModel):
    first_epoch: int
    num_epochs: int
    time_s: float
    sifted_length: int
    sampled: int
    q_sample: float
    q_ec: float
    leaked_bits: int
    final_length: int


class FidelitySummary(BaseModel):
    """Matriz de fidelidad de los estados falsos (calibración o sesión)."""

    counts: list[list[int]]
    sent: list[int]
    double_clicks: list[int]
    no_clicks: list[int]
    diagonal_fractions: list[Optional[float]]
    off_diagonal: int
    double_click_rate: float


class CalibrationSummary(BaseModel):
    fidelity: FidelitySummary
    trims_ticks: list[int]
    mean_latency_ticks: list[Optional[float]]
    spread_ticks: int


class EveSummary(BaseModel):
    clicks: int = 0
    registered: int = 0
    suppressed: int = 0
    faked_states: int = 0
    resent_photons: int = 0
    fidelity: Optional[FidelitySummary] = None
    calibration: Optional[CalibrationSummary] = None
    extraction_error: Optional[str] = None
    sync_offset_ticks: Optional[int] = None
    confirmations: int = 0
    unmapped: int = 0
    sifted_length: int = 0
    sifted_discrepancies: Optional[int] = None
    final_length: int = 0
    verified_blocks: int = 0
    failed_blocks: list[int] = Field(default_factory=list)


class CountermeasureSummary(BaseModel):
    sent: int
    detected: int
    expected: float
    attack_detected: bool


class Verdicts(BaseModel):
    alice_equals_bob: Optional[bool] = None
    eve_equals_bob_sifted: Optional[bool] = None
    eve_equals_bob_final: Optional[bool] = None


class SessionReport(BaseModel):
    """Resultado de una sesión; no contiene rutas ni tiempos de reloj."""

    scenario: Scenario
    rng_seed: int
    duration_s: float
    completed: bool = True
    abort_reason: Optional[str] = None

    raw_clicks: dict[str, int] = Field(default_factory=dict)
    sync_offset_ticks: Optional[int] = None
    coincidences: int = 0
    double_clicks: int = 0
    sifted_length: int = 0
    final_length: int = 0
    final_to_sifted: Optional[float] = None

    qber: Optional[float] = None
    qber_sample: Optional[float] = None
    qber_sifted: Optional[float] = None
    qber_series: list[QberPoint] = Field(default_factory=list)

    rates: Optional[RateSeries] = None
    mean_rates: dict[str, float] = Field(default_factory=dict)

    fwhm_ps: list[Optional[float]] = Field(default_factory=list)
    mean_fwhm_ps: Optional[float] = None

    eve: Optional[EveSummary] = None
    countermeasure: Optional[CountermeasureSummary] = None
    verdicts: Verdicts = Field(default_factory=Verdicts)


# ==================== CÁLCULOS ====================


def _bin_index(timestamps: np.ndarray, bin_ticks: int, n_bins: int) -> np.ndarray:
    return np.clip(np.asarray(timestamps, dtype=np.int64) // bin_ticks, 0, n_bins - 1)


def report_rates(
    bob_clicks: ClickStream,
    sifted_timestamps: np.ndarray,
    sifted_epochs: np.ndarray,
    blocks: Sequence[Any],
    duration_s: float,
    bin_s: float = 1.0,
) -> RateSeries:
    """
    Tasas cruda, tamizada y final por bin de tiempo.

    Los bits finales de cada bloque se reparten entre sus bins en proporción a
    los bits tamizados que aportó cada uno, de modo que final ≤ tamizada ≤
    cruda en todos los bins.

    Args:
        bob_clicks: Clics crudos de Bob.
        sifted_timestamps: Tiempo (reloj de Bob) de cada bit tamizado.
        sifted_epochs: Época de cada bit tamizado.
        blocks: Resultados por bloque (first_epoch, num_epochs, final_length).
        duration_s: Duración simulada.
        bin_s: Ancho de bin en segundos.
    """
    if bin_s <= 0:
        raise ValueError(f"El ancho de bin debe ser positivo: {bin_s}")
    n_bins = max(1, math.ceil(duration_s / bin_s - 1e-9))
    bin_ticks = int(round(bin_s * TICKS_PER_SECOND))

    raw = np.bincount(_bin_index(bob_clicks.timestamps, bin_ticks, n_bins), minlength=n_bins)
    sifted_bins = _bin_index(sifted_timestamps, bin_ticks, n_bins)
    sifted = np.bincount(sifted_bins, minlength=n_bins)

    final = np.zeros(n_bins, dtype=np.float64)
    for block in blocks:
        mask = (sifted_epochs >= block.first_epoch) & (
            sifted_epochs < block.first_epoch + block.num_epochs
        )
        count = int(mask.sum())
        if count and block.final_length:
            share = np.bincount(sifted_bins[mask], minlength=n_bins)
            final += share * (block.final_length / count)

    return RateSeries(
        bin_s=bin_s,
        time_s=[(k + 0.5) * bin_s for k in range(n_bins)],
        raw=(raw / bin_s).tolist(),
        sifted=(sifted / bin_s).tolist(),
        final=(final / bin_s).tolist(),
    )


def key_discrepancies(a: np.ndarray, b: np.ndarray) -> int:
    """Bits distintos en la parte común más la diferencia de longitud."""
    common = min(a.size, b.size)
    return int(np.count_nonzero(a[:common] != b[:common])) + abs(a.size - b.size)


def keys_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.size == b.size and bool(np.array_equal(a, b))


def write_report(report: SessionReport, directory: Path) -> Path:
    """Escribe report.json, rates.csv y qber.csv."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / REPORT_FILE
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    if report.rates is not None:
        report.rates.to_csv(directory / RATES_FILE)
    with (directory / QBER_FILE).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["first_epoch", "time_s", "sifted", "q_sample", "q_ec", "final"])
        for p in report.qber_series:
            writer.writerow(
                [p.first_epoch, f"{p.time_s:.3f}", p.sifted_length, f"{p.q_sample:.5f}",
                 f"{p.q_ec:.5f}", p.final_length]
            )
    return path


def load_report(directory: Path) -> SessionReport:
    path = Path(directory) / REPORT_FILE
    if not path.is_file():
        raise StorageError(f"No existe {path}")
    return SessionReport.model_validate_json(path.read_text(encoding="utf-8"))


def _load_window(directory: Path) -> CoincidenceWindowConfig:
    path = directory / CONFIG_FILE
    if not path.is_file():
        return CoincidenceWindowConfig()
    data = json.loads(path.read_text(encoding="utf-8"))
    return CoincidenceWindowConfig.model_validate(data.get("window", {}))


# ==================== ANÁLISIS FUERA DE LÍNEA ====================


def analyze(session_dir: Path) -> SessionReport:
    """
    Relee una sesión persistida y recalcula longitudes y veredictos desde las claves.

    Raises:
        StorageError: Si falta el informe o algún archivo está corrupto.
    """
    session_dir = Path(session_dir)
    report = load_report(session_dir)
    finals = {
        party: read_key_directory(session_dir / FINAL_KEYS_DIR / party)
        for party in ("alice", "bob", "eve")
        if (session_dir / FINAL_KEYS_DIR / party).is_dir()
    }
    sifted = {
        party: read_key_directory(session_dir / SIFTED_DIR / party)
        for party in ("alice", "bob", "eve")
        if (session_dir / SIFTED_DIR / party).is_dir()
    }

    if "bob" in sifted:
        report.sifted_length = int(sifted["bob"].size)
    if "alice" in finals and "bob" in finals:
        report.final_length = int(finals["bob"].size)
        report.verdicts.alice_equals_bob = report.completed and keys_equal(
            finals["alice"], finals["bob"]
        )
    if "alice" in sifted and "bob" in sifted and sifted["bob"].size:
        # Ambas claves incluyen la muestra de QBER: es la discrepancia real del tamizado
        report.qber_sifted = key_discrepancies(sifted["alice"], sifted["bob"]) / sifted["bob"].size
    if "eve" in sifted and "bob" in sifted:
        report.verdicts.eve_equals_bob_sifted = keys_equal(sifted["eve"], sifted["bob"])
    if "eve" in finals and "bob" in finals:
        report.verdicts.eve_equals_bob_final = keys_equal(finals["eve"], finals["bob"])

    logger.info(
        f"Análisis de {session_dir.name}: tamizada={report.sifted_length}, "
        f"final={report.final_length}, veredictos={report.verdicts.model_dump()}"
    )
    return report


def histogram(session_dir: Path, *, write: bool = True) -> CoincidenceHistogram:
    """
    Recalcula los histogramas de coincidencias desde los eventos crudos.

    Raises:
        StorageError: Si faltan los eventos de Alice o de Bob.
        SynchronizationError: Si los flujos no correlacionan.
    """
    session_dir = Path(session_dir)
    window = _load_window(session_dir)
    for name in (ALICE_RAW_DIR, BOB_RAW_DIR):
        if not (session_dir / name).is_dir():
            raise StorageError(f"Faltan los eventos crudos: {session_dir / name}")
    alice = read_clicks(session_dir / ALICE_RAW_DIR)
    bob = read_clicks(session_dir / BOB_RAW_DIR)
    offset = synchronize(
        alice, bob, window.sync_search_range_ticks, window.sync_coarse_bin_ticks,
        window.sync_fine_bin_ticks,
    )
    pairs = match_coincidences(alice, bob, window, offset)
    result = build_histogram(pairs, alice, bob, window, offset)
    if write:
        result.to_csv(session_dir / HISTOGRAM_FILE)
    mean = result.mean_fwhm_ps()
    logger.info(f"Histograma: {result.total} coincidencias, FWHM medio={mean}")
    return result


# ==================== EXTRACCIÓN FUERA DE LÍNEA ====================


class ExtractionSummary(BaseModel):
    sync_offset_ticks: Optional[int]
    confirmations: int
    unmapped: int
    sifted_length: int
    final_length: int
    verified_blocks: int
    failed_blocks: list[int]
    sifted_discrepancies: Optional[int] = None
    final_discrepancies: Optional[int] = None


def extract_offline(
    alice_dir: Path,
    bob_dir: Path,
    eve_dir: Path,
    out_dir: Path,
    *,
    bob_sifted_dir: Optional[Path] = None,
    bob_final_dir: Optional[Path] = None,
    window: Optional[CoincidenceWindowConfig] = None,
) -> ExtractionSummary:
    """
    Extracción de Eve solo con lo persistido: frames recibidos por ambos lados y sus clics.

    Escribe en ``out_dir`` la clave tamizada de Eve en ASCII, sus claves finales
    por bloque y ``extraction.json``; si se dan las claves de Bob, también su
    ASCII y ``discrepancies.txt``.

    Raises:
        ExtractionAbort: Si Eve no puede asignar las confirmaciones de Bob.
        StorageError: Si algún archivo está corrupto.
    """
    wiretap = WiretapLog(frames=merge_transcript(alice_dir, bob_dir), eve_clicks=read_clicks(eve_dir))
    result = extract_key(wiretap, window=window)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.eve_sifted.to_ascii(out_dir / "eve_sifted.txt")
    for first, bits in sorted(result.final_blocks.items()):
        write_key(out_dir / "eve-finalkeys" / f"{first:08x}.key", StoredKey(Party.EVE, first, 0, bits))

    summary = ExtractionSummary(
        sync_offset_ticks=result.sync_offset,
        confirmations=result.confirmations,
        unmapped=result.unmapped,
        sifted_length=len(result.eve_sifted),
        final_length=int(result.final_key().size),
        verified_blocks=result.verified_blocks,
        failed_blocks=list(result.failed_blocks),
    )
    lines = []
    if bob_sifted_dir is not None:
        bob_sifted = read_key_directory(bob_sifted_dir)
        (out_dir / "bob_sifted.txt").write_text(_ascii_lines(bits_to_ascii(bob_sifted)), encoding="ascii")
        summary.sifted_discrepancies = key_discrepancies(result.eve_sifted.bits, bob_sifted)
        lines.append(f"sifted {summary.sifted_discrepancies} de {bob_sifted.size}")
    if bob_final_dir is not None:
        bob_final = read_key_directory(bob_final_dir)
        summary.final_discrepancies = key_discrepancies(result.final_key(), bob_final)
        lines.append(f"final {summary.final_discrepancies} de {bob_final.size}")
    if lines:
        (out_dir / "discrepancies.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    (out_dir / "extraction.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Extracción fuera de línea: {summary.model_dump()}")
    return summary


def _ascii_lines(text: str, width: int = ASCII_LINE_BITS) -> str:
    lines = [text[i : i + width] for i in range(0, len(text), width)]
    return "\n".join(lines) + ("\n" if lines else "")
