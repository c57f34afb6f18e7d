"""Máquina de estados de un fotodiodo de avalancha (APD).

Cubre la detección en modo Geiger (eficiencia, tiempo muerto, jitter), el
cegado con luz c.w. y la respuesta clásica a pulsos brillantes gobernada por
una tabla de umbrales (p_never, p_always) en función de la potencia c.w.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from app.config import DetectorConfig
from app.photonics import Port
from app.timebase import (
    TICKS_PER_NS,
    TICKS_PER_SECOND,
    ClickRecord,
    Party,
    fwhm_ps_to_sigma_ticks,
)

logger = logging.getLogger(__name__)

# Por encima de esta potencia c.w. los umbrales deben crecer con la potencia
MONOTONE_ABOVE_W = 1e-6
# Suelo para log10 de potencias nulas
_LOG_FLOOR_W = 1e-30


class ApdMode(str, Enum):
    GEIGER = "GEIGER"
    BLINDED = "BLINDED"


# ==================== UMBRALES ====================


@dataclass(frozen=True)
class ThresholdProfile:
    """
    Umbrales de clic de un detector cegado en función de la potencia c.w.

    Las filas se interpolan linealmente en log10(cw) y se saturan en los
    extremos. scale_factor multiplica ambos umbrales (heterogeneidad entre
    detectores).
    """

    cw_power: np.ndarray
    p_never: np.ndarray
    p_always: np.ndarray
    scale_factor: float = 1.0

    def __post_init__(self) -> None:
        cw = np.asarray(self.cw_power, dtype=np.float64)
        never = np.asarray(self.p_never, dtype=np.float64)
        always = np.asarray(self.p_always, dtype=np.float64)
        object.__setattr__(self, "cw_power", cw)
        object.__setattr__(self, "p_never", never)
        object.__setattr__(self, "p_always", always)

        if cw.ndim != 1 or cw.size == 0 or cw.shape != never.shape or cw.shape != always.shape:
            raise ValueError("La tabla de umbrales necesita al menos una fila completa")
        if np.any(cw <= 0) or np.any(never <= 0):
            raise ValueError("Las potencias de la tabla de umbrales deben ser positivas")
        if np.any(np.diff(cw) <= 0):
            raise ValueError("Las filas deben estar ordenadas por potencia c.w. creciente")
        if np.any(never >= always):
            raise ValueError("Cada fila debe cumplir p_never < p_always")
        if self.scale_factor <= 0:
            raise ValueError(f"scale_factor debe ser positivo: {self.scale_factor}")

        high = cw > MONOTONE_ABOVE_W
        if np.any(np.diff(never[high]) < 0) or np.any(np.diff(always[high]) < 0):
            raise ValueError("Los umbrales no pueden decrecer por encima de 1 µW")

        object.__setattr__(self, "_log_cw", np.log10(cw))

    @classmethod
    def from_rows(
        cls, rows: Iterable[Sequence[float]], scale_factor: float = 1.0
    ) -> "ThresholdProfile":
        table = np.array([tuple(r) for r in rows], dtype=np.float64).reshape(-1, 3)
        return cls(table[:, 0], table[:, 1], table[:, 2], scale_factor)

    @classmethod
    def load(cls, path: Path, scale_factor: float = 1.0) -> "ThresholdProfile":
        """
        Lee una tabla de texto con filas ``cw_power p_never p_always`` en W.

        Se admiten comentarios con ``#`` y separadores espacio o coma.
        """
        rows = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].replace(",", " ").strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: se esperaban 3 columnas, hay {len(parts)}")
            rows.append([float(p) for p in parts])
        logger.debug(f"Tabla de umbrales cargada de {path}: {len(rows)} filas")
        return cls.from_rows(rows, scale_factor)

    def with_scale(self, scale_factor: float) -> "ThresholdProfile":
        return ThresholdProfile(self.cw_power, self.p_never, self.p_always, scale_factor)

    def thresholds(self, cw_power: float) -> tuple[float, float]:
        """(p_never, p_always) escalados para la potencia c.w. dada."""
        x = math.log10(max(cw_power, _LOG_FLOOR_W))
        never = float(np.interp(x, self._log_cw, self.p_never))
        always = float(np.interp(x, self._log_cw, self.p_always))
        return never * self.scale_factor, always * self.scale_factor


def click_probability(peak_power: float, p_never: float, p_always: float) -> float:
    """Rampa lineal entre p_never (nunca) y p_always (siempre)."""
    if peak_power <= p_never:
        return 0.0
    if peak_power >= p_always:
        return 1.0
    return (peak_power - p_never) / (p_always - p_never)


# ==================== ESTADO DEL APD ====================


@dataclass
class ApdState:
    """Estado mutable de un detector; pertenece a un único actor."""

    port: Port
    party: Party
    profile: Optional[ThresholdProfile] = None
    mode: ApdMode = ApdMode.GEIGER
    cw_power_at_diode: float = 0.0
    last_click_time: Optional[int] = None
    deadtime_ns: float = 1000.0
    efficiency: float = 0.5
    jitter_fwhm_ps: float = 500.0
    blinded_jitter_fwhm_ps: float = 160.0
    dark_rate_hz: float = 0.0
    blind_threshold_w: float = 38e-12
    recovery_full_ns: float = 1000.0
    recovery_min_ns: float = 550.0
    recovery_rho_max: float = 1.12
    ramp_widening: float = 2.77
    # Último pulso brillante que llegó al diodo (para el cross-talk)
    last_pulse_time: Optional[int] = None
    last_pulse_fraction: float = 0.0
    clicks: int = field(default=0)

    @classmethod
    def from_config(
        cls,
        cfg: DetectorConfig,
        port: Port,
        party: Party,
        profile: Optional[ThresholdProfile] = None,
    ) -> "ApdState":
        return cls(
            port=port,
            party=party,
            profile=profile,
            deadtime_ns=cfg.deadtime_ns,
            efficiency=cfg.efficiency,
            jitter_fwhm_ps=cfg.jitter_fwhm_ps,
            blinded_jitter_fwhm_ps=cfg.blinded_jitter_fwhm_ps,
            dark_rate_hz=cfg.dark_rate_hz,
            blind_threshold_w=cfg.blind_threshold_w,
            recovery_full_ns=cfg.recovery_full_ns,
            recovery_min_ns=cfg.recovery_min_ns,
            recovery_rho_max=cfg.recovery_rho_max,
            ramp_widening=cfg.ramp_widening,
        )

    @property
    def deadtime_ticks(self) -> int:
        return int(round(self.deadtime_ns * TICKS_PER_NS))

    def in_deadtime(self, t: int) -> bool:
        return self.last_click_time is not None and t - self.last_click_time <= self.deadtime_ticks

    def recovery_fraction(self, interval_ns: Optional[float]) -> float:
        """0 para pulsos aislados, 1 en la separación mínima (rampa lineal)."""
        if interval_ns is None:
            return 0.0
        span = self.recovery_full_ns - self.recovery_min_ns
        return float(np.clip((self.recovery_full_ns - interval_ns) / span, 0.0, 1.0))

    def _register(self, t: int) -> ClickRecord:
        self.last_click_time = t
        self.clicks += 1
        return ClickRecord(t, int(self.port), self.party)


def build_detectors(
    cfg: DetectorConfig,
    party: Party,
    profile: Optional[ThresholdProfile] = None,
) -> list[ApdState]:
    """Crea los 4 detectores de un participante, uno por puerto."""
    if profile is None:
        profile = ThresholdProfile.load(cfg.resolved_profile_path())
    return [
        ApdState.from_config(cfg, port, party, profile.with_scale(cfg.scale_factors[port]))
        for port in Port
    ]


# ==================== OPERACIONES ====================


def _jitter(fwhm_ps: float, rng: np.random.Generator) -> int:
    sigma = fwhm_ps_to_sigma_ticks(fwhm_ps)
    if sigma <= 0:
        return 0
    return int(round(rng.normal(0.0, sigma)))


def geiger_detect(
    state: ApdState,
    photon_time: int,
    rng: np.random.Generator,
    *,
    u: Optional[float] = None,
) -> Optional[ClickRecord]:
    """
    Detección de un fotón en modo Geiger.

    Args:
        state: Detector (se actualiza last_click_time si hay clic).
        photon_time: Llegada del fotón en ticks.
        rng: Generador para la eficiencia y el jitter.
        u: Sorteo uniforme de eficiencia ya realizado por el llamador.

    Returns:
        ClickRecord con timestamp = llegada + jitter, o None. Un detector
        cegado absorbe el fotón sin error.
    """
    if state.mode is ApdMode.BLINDED:
        return None
    if state.in_deadtime(photon_time):
        return None

    draw = rng.random() if u is None else u
    if draw >= state.efficiency:
        return None

    t = max(0, photon_time + _jitter(state.jitter_fwhm_ps, rng))
    return state._register(t)


def update_blinding(state: ApdState, cw_power_at_diode: float) -> ApdState:
    """Fija la potencia c.w. en el diodo y el modo resultante."""
    if cw_power_at_diode < 0:
        raise ValueError(f"La potencia c.w. no puede ser negativa: {cw_power_at_diode}")
    state.cw_power_at_diode = cw_power_at_diode
    state.mode = (
        ApdMode.BLINDED if cw_power_at_diode >= state.blind_threshold_w else ApdMode.GEIGER
    )
    return state


def effective_thresholds(
    state: ApdState, last_trigger_interval_ns: Optional[float]
) -> tuple[float, float]:
    """
    Umbrales en vigor para un pulso, incluida la recuperación tras el anterior.

    Con w = r·f (r la fracción de recuperación, f la fracción de p_always que
    entregó el pulso previo), la rampa se ensancha en 1 + ramp_widening·w
    alrededor de p_always y ambos umbrales se multiplican por
    ρ = 1 + (rho_max − 1)·w.
    """
    if state.profile is None:
        raise ValueError("El detector no tiene tabla de umbrales")
    p_never, p_always = state.profile.thresholds(state.cw_power_at_diode)
    weight = state.recovery_fraction(last_trigger_interval_ns) * state.last_pulse_fraction
    if weight > 0:
        width = (p_always - p_never) * (1.0 + state.ramp_widening * weight)
        rho = 1.0 + (state.recovery_rho_max - 1.0) * weight
        p_never = rho * max(p_always - width, 0.0)
        p_always = rho * p_always
    return p_never, p_always


def blinded_response(
    state: ApdState,
    pulse_peak_power_at_diode: float,
    pulse_time: int,
    last_trigger_interval_ns: Optional[float],
    rng: np.random.Generator,
    *,
    u: Optional[float] = None,
) -> Optional[ClickRecord]:
    """
    Respuesta clásica de un detector cegado a un pulso brillante.

    Args:
        state: Detector en modo BLINDED.
        pulse_peak_power_at_diode: Potencia pico que llega al diodo (W).
        pulse_time: Llegada del pulso (ticks).
        last_trigger_interval_ns: Separación con el pulso anterior que iluminó
            este diodo, o None si el pulso está aislado.
        rng: Generador para el sorteo y el jitter.
        u: Sorteo uniforme compartido entre los detectores de un mismo pulso.

    Returns:
        ClickRecord o None.

    Raises:
        ValueError: Si el detector está en modo Geiger o la potencia es negativa.
    """
    if state.mode is not ApdMode.BLINDED:
        raise ValueError("blinded_response requiere un detector en modo BLINDED")
    if pulse_peak_power_at_diode < 0:
        raise ValueError(f"La potencia pico no puede ser negativa: {pulse_peak_power_at_diode}")

    p_never, p_always = effective_thresholds(state, last_trigger_interval_ns)
    probability = click_probability(pulse_peak_power_at_diode, p_never, p_always)
    draw = rng.random() if u is None else u

    if pulse_peak_power_at_diode > 0:
        _, base_always = state.profile.thresholds(state.cw_power_at_diode)
        state.last_pulse_time = pulse_time
        state.last_pulse_fraction = min(1.0, pulse_peak_power_at_diode / base_always)

    if draw >= probability:
        return None
    t = max(0, pulse_time + _jitter(state.blinded_jitter_fwhm_ps, rng))
    return state._register(t)


def register_dark_count(state: ApdState, t: int) -> Optional[ClickRecord]:
    """Materializa una cuenta oscura si el detector sigue en Geiger y fuera de tiempo muerto."""
    if state.mode is ApdMode.BLINDED or state.in_deadtime(t):
        return None
    return state._register(t)


def dark_counts(
    state: ApdState,
    interval: tuple[int, int],
    rng: np.random.Generator,
) -> list[ClickRecord]:
    """
    Cuentas oscuras de Poisson en [inicio, fin) respetando el tiempo muerto.

    No modifica el estado: el bucle de eventos vuelve a validar cada candidato
    contra el estado vigente en el momento de procesarlo.
    """
    start, end = interval
    if state.mode is ApdMode.BLINDED or state.dark_rate_hz <= 0 or end <= start:
        return []

    expected = state.dark_rate_hz * (end - start) / TICKS_PER_SECOND
    count = int(rng.poisson(expected))
    times = np.sort(rng.integers(start, end, count))

    records = []
    last = state.last_click_time
    deadtime = state.deadtime_ticks
    for t in times.tolist():
        if last is not None and t - last <= deadtime:
            continue
        records.append(ClickRecord(t, int(state.port), state.party))
        last = t
    return records
