"""Álgebra de polarización, fuente de pares, canal de fibra y analizador de 4 puertos.

El analizador pasivo (divisor 50/50 seguido de dos bases) es el mismo para
Alice, Bob y la réplica de Bob que usa Eve. Solo importan fracciones de
potencia, así que la polarización se representa con vectores de Stokes.
"""

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np

from app.config import ChannelParams
from app.timebase import TICKS_PER_SECOND, ns_to_ticks, seconds_to_ticks

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-9


class Basis(IntEnum):
    Z = 0  # H/V
    X = 1  # ±45°


class Port(IntEnum):
    """Puertos del analizador en el orden de la matriz de fidelidad."""

    V = 0
    MINUS45 = 1
    H = 2
    PLUS45 = 3

    @property
    def label(self) -> str:
        return PORT_LABELS[self]


PORT_LABELS = {Port.V: "V", Port.MINUS45: "-45", Port.H: "H", Port.PLUS45: "+45"}


@dataclass(frozen=True)
class AnalyzerPort:
    index: Port
    basis: Basis
    bit: int


# Convención fija: H→1, V→0, +45°→0, −45°→1
ANALYZER_PORTS: tuple[AnalyzerPort, ...] = (
    AnalyzerPort(Port.V, Basis.Z, 0),
    AnalyzerPort(Port.MINUS45, Basis.X, 1),
    AnalyzerPort(Port.H, Basis.Z, 1),
    AnalyzerPort(Port.PLUS45, Basis.X, 0),
)
PORT_BASIS = np.array([p.basis for p in ANALYZER_PORTS], dtype=np.int8)
PORT_BIT = np.array([p.bit for p in ANALYZER_PORTS], dtype=np.int8)


def port_for(basis: int, bit: int) -> Port:
    """Puerto cuyo autoestado corresponde a (base, bit)."""
    if basis == Basis.Z:
        return Port.H if bit else Port.V
    return Port.MINUS45 if bit else Port.PLUS45


# Puerto indexado por basis * 2 + bit
_PORT_BY_BASIS_BIT = np.array(
    [port_for(b, v) for b in (Basis.Z, Basis.X) for v in (0, 1)], dtype=np.int8
)


# ==================== POLARIZACIÓN ====================


@dataclass(frozen=True)
class PolarizationState:
    """Vector de Stokes normalizado (s1: H/V, s2: ±45°, s3: circular)."""

    s1: float
    s2: float
    s3: float

    def __post_init__(self) -> None:
        if self.norm_squared > 1 + NORM_TOLERANCE:
            raise ValueError(
                f"Vector de Stokes fuera de la esfera de Poincaré: |s|² = {self.norm_squared}"
            )

    @property
    def norm_squared(self) -> float:
        return self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3

    @property
    def fully_polarized(self) -> bool:
        return abs(self.norm_squared - 1.0) <= 1e-6

    @classmethod
    def from_stokes(cls, s1: float, s2: float, s3: float) -> "PolarizationState":
        """Normaliza un vector arbitrario a un estado totalmente polarizado."""
        norm = math.sqrt(s1 * s1 + s2 * s2 + s3 * s3)
        if norm == 0:
            raise ValueError("El vector de Stokes no puede ser nulo")
        return cls(s1 / norm, s2 / norm, s3 / norm)

    @classmethod
    def horizontal(cls) -> "PolarizationState":
        return cls(1.0, 0.0, 0.0)

    @classmethod
    def vertical(cls) -> "PolarizationState":
        return cls(-1.0, 0.0, 0.0)

    @classmethod
    def diagonal(cls) -> "PolarizationState":
        """+45°."""
        return cls(0.0, 1.0, 0.0)

    @classmethod
    def antidiagonal(cls) -> "PolarizationState":
        """−45°."""
        return cls(0.0, -1.0, 0.0)

    @classmethod
    def right_circular(cls) -> "PolarizationState":
        return cls(0.0, 0.0, 1.0)

    @classmethod
    def left_circular(cls) -> "PolarizationState":
        return cls(0.0, 0.0, -1.0)

    @classmethod
    def linear(cls, theta_deg: float) -> "PolarizationState":
        """Polarización lineal a θ grados de la horizontal (s3 = 0)."""
        two_theta = math.radians(2 * theta_deg)
        return cls(math.cos(two_theta), math.sin(two_theta), 0.0)

    def orthogonal(self) -> "PolarizationState":
        """Punto antipodal en la esfera de Poincaré."""
        return PolarizationState(-self.s1, -self.s2, -self.s3)


PORT_POLARIZATION: dict[Port, PolarizationState] = {
    Port.V: PolarizationState.vertical(),
    Port.MINUS45: PolarizationState.antidiagonal(),
    Port.H: PolarizationState.horizontal(),
    Port.PLUS45: PolarizationState.diagonal(),
}


def split_powers(pol: PolarizationState, power: float) -> np.ndarray:
    """
    Reparte una potencia entre los 4 puertos del analizador pasivo.

    Args:
        pol: Polarización totalmente polarizada de la luz incidente.
        power: Potencia incidente (W). También vale 1 para probabilidades.

    Returns:
        Array de 4 potencias indexado por Port (V, −45°, H, +45°) cuya suma es ``power``.

    Raises:
        ValueError: Si la potencia es negativa o el estado no está totalmente polarizado.
    """
    if power < 0:
        raise ValueError(f"La potencia no puede ser negativa: {power}")
    if not pol.fully_polarized:
        raise ValueError("split_powers requiere un estado totalmente polarizado")

    quarter = power / 4.0
    return np.array(
        [
            quarter * (1.0 - pol.s1),
            quarter * (1.0 - pol.s2),
            quarter * (1.0 + pol.s1),
            quarter * (1.0 + pol.s2),
        ],
        dtype=np.float64,
    )


def port_probabilities(pol: PolarizationState) -> np.ndarray:
    """Límite de un fotón de split_powers: probabilidad de cada puerto."""
    probs = np.clip(split_powers(pol, 1.0), 0.0, None)
    return probs / probs.sum()


# Probabilidades de puerto para un fotón preparado en el autoestado de cada puerto
PORT_TRANSITIONS = np.stack([port_probabilities(PORT_POLARIZATION[p]) for p in Port])


def sample_port(pol: PolarizationState, rng: np.random.Generator) -> AnalyzerPort:
    """Muestrea el puerto por el que sale un único fotón."""
    probs = port_probabilities(pol)
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return ANALYZER_PORTS[min(index, 3)]


def sample_ports(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Versión vectorizada de sample_port sobre filas de probabilidades (N, 4)."""
    probabilities = np.atleast_2d(probabilities)
    cumulative = np.cumsum(probabilities, axis=1)
    u = rng.random(probabilities.shape[0])
    index = (u[:, None] >= cumulative).sum(axis=1)
    return np.minimum(index, 3).astype(np.int8)


# ==================== FUENTE DE PARES ====================


@dataclass(frozen=True)
class PairEvent:
    emission_time: int
    correlation_id: int
    intrinsic_error_flag_z: bool
    intrinsic_error_flag_x: bool

    def error_flag(self, basis: int) -> bool:
        return self.intrinsic_error_flag_z if basis == Basis.Z else self.intrinsic_error_flag_x


@dataclass
class PairBatch:
    """Pares emitidos en una ventana, en forma columnar."""

    emission_times: np.ndarray
    correlation_ids: np.ndarray
    error_z: np.ndarray
    error_x: np.ndarray

    def __len__(self) -> int:
        return int(self.emission_times.size)

    def __iter__(self) -> Iterator[PairEvent]:
        for t, cid, ez, ex in zip(
            self.emission_times.tolist(),
            self.correlation_ids.tolist(),
            self.error_z.tolist(),
            self.error_x.tolist(),
        ):
            yield PairEvent(t, cid, ez, ex)


def generate_pairs(
    rate_hz: float,
    duration_s: float,
    q_intrinsic: float,
    rng: np.random.Generator,
    *,
    start_tick: int = 0,
    first_id: int = 0,
) -> PairBatch:
    """
    Genera los pares de un proceso de Poisson en (start_tick, start_tick + duración].

    Los tiempos son estrictamente crecientes (separación mínima de 1 tick), de
    modo que ventanas consecutivas se pueden encadenar sin solaparse.

    Args:
        rate_hz: Tasa media de pares (> 0).
        duration_s: Longitud de la ventana en segundos.
        q_intrinsic: Probabilidad de error intrínseco por base, en [0, 0.5].
        rng: Generador de números aleatorios.
        start_tick: Origen de la ventana.
        first_id: Primer correlation_id asignado.

    Returns:
        PairBatch con los pares ordenados.

    Raises:
        ValueError: Si la tasa no es positiva o q_intrinsic está fuera de rango.
    """
    if rate_hz <= 0:
        raise ValueError(f"La tasa de pares debe ser mayor a 0: {rate_hz}")
    if not 0.0 <= q_intrinsic <= 0.5:
        raise ValueError(f"q_intrinsic debe estar en [0, 0.5]: {q_intrinsic}")
    if duration_s < 0:
        raise ValueError(f"La duración no puede ser negativa: {duration_s}")

    horizon = seconds_to_ticks(duration_s)
    mean_gap = TICKS_PER_SECOND / rate_hz
    expected = rate_hz * duration_s
    draw = int(expected + 6.0 * math.sqrt(expected) + 16)

    chunks: list[np.ndarray] = []
    cursor = 0
    while True:
        gaps = np.maximum(1, np.rint(rng.exponential(mean_gap, draw))).astype(np.int64)
        times = cursor + np.cumsum(gaps)
        inside = times <= horizon
        chunks.append(times[inside])
        if not inside.all():
            break
        cursor = int(times[-1])

    emission = np.concatenate(chunks) + start_tick
    count = emission.size
    return PairBatch(
        emission_times=emission,
        correlation_ids=np.arange(first_id, first_id + count, dtype=np.int64),
        error_z=rng.random(count) < q_intrinsic,
        error_x=rng.random(count) < q_intrinsic,
    )


def measure_pair(
    pair: PairEvent, basis_a: int, basis_b: int, rng: np.random.Generator
) -> tuple[int, int]:
    """
    Correlaciones operacionales del singlete.

    Misma base: bits anticorrelacionados salvo que el par tenga el flag de error
    de esa base. Bases distintas: bits independientes y uniformes.
    """
    if basis_a not in (Basis.Z, Basis.X) or basis_b not in (Basis.Z, Basis.X):
        raise ValueError(f"Bases inválidas: {basis_a}, {basis_b}")

    bit_a = int(rng.integers(0, 2))
    if basis_a == basis_b:
        bit_b = bit_a if pair.error_flag(basis_a) else 1 - bit_a
    else:
        bit_b = int(rng.integers(0, 2))
    return bit_a, bit_b


def measure_alice(batch: PairBatch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Mide virtualmente cada par en la base pasiva de Alice.

    Devuelve el puerto de Alice y el puerto cuyo autoestado lleva el fotón
    compañero: el de la misma base con el bit opuesto (o igual si hay error
    intrínseco). Medir ese fotón con sample_port reproduce measure_pair.
    """
    count = len(batch)
    basis = rng.integers(0, 2, count).astype(np.int8)
    bit_a = rng.integers(0, 2, count).astype(np.int8)
    flag = np.where(basis == Basis.Z, batch.error_z, batch.error_x)
    partner_bit = np.where(flag, bit_a, 1 - bit_a).astype(np.int8)
    alice_ports = _PORT_BY_BASIS_BIT[basis * 2 + bit_a]
    partner_ports = _PORT_BY_BASIS_BIT[basis * 2 + partner_bit]
    return alice_ports, partner_ports


# ==================== CANAL ====================


def survival_probability(loss_db: float) -> float:
    if math.isinf(loss_db):
        return 0.0
    return 10.0 ** (-loss_db / 10.0)


def channel_delay_ticks(params: ChannelParams, fraction: float = 1.0) -> int:
    return ns_to_ticks(params.length_m * fraction * params.group_delay_ns_per_m)


def apply_channel(
    event_time: int, params: ChannelParams, rng: np.random.Generator
) -> Optional[int]:
    """
    Propaga un fotón por la fibra.

    Returns:
        Tiempo de llegada en ticks, o None si el fotón se pierde.
    """
    if rng.random() >= survival_probability(params.loss_db):
        return None
    return event_time + channel_delay_ticks(params)


def apply_channel_batch(
    times: np.ndarray,
    params: ChannelParams,
    rng: np.random.Generator,
    *,
    fraction: float = 1.0,
    extra_loss_db: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Versión vectorizada de apply_channel para un tramo de la línea.

    Args:
        times: Tiempos de entrada (ticks).
        params: Parámetros de la línea completa.
        rng: Generador.
        fraction: Fracción de la línea recorrida (pérdida y retardo proporcionales).
        extra_loss_db: Pérdida adicional concentrada (por ejemplo, inserción de Eve).

    Returns:
        (máscara de supervivencia, tiempos de llegada de los supervivientes).
    """
    survival = survival_probability(params.loss_db * fraction + extra_loss_db)
    alive = rng.random(times.size) < survival
    delay = channel_delay_ticks(params, fraction)
    return alive, times[alive] + delay
