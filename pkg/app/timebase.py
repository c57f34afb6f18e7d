"""Base de tiempos del simulador y registros de clics.

Un tick son 125 ps, de modo que una época de 2^29 ns son exactamente 2^32 ticks
y el índice de época se obtiene con un desplazamiento.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, NamedTuple

import numpy as np

TICK_PS = 125
TICKS_PER_NS = 8
EPOCH_SHIFT = 32
EPOCH_TICKS = 1 << EPOCH_SHIFT
TICKS_PER_SECOND = 8_000_000_000

# FWHM = 2·sqrt(2·ln 2)·σ
FWHM_PER_SIGMA = 2.3548200450309493


def ns_to_ticks(ns: float) -> int:
    """Convierte nanosegundos a ticks enteros (redondeo al más cercano)."""
    return int(round(ns * TICKS_PER_NS))


def seconds_to_ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


def fwhm_ps_to_sigma_ticks(fwhm_ps: float) -> float:
    """Desviación estándar en ticks de un jitter gaussiano con el FWHM dado."""
    return fwhm_ps / FWHM_PER_SIGMA / TICK_PS


class Party(IntEnum):
    """Participantes. El orden numérico desempata eventos simultáneos."""

    ALICE = 0
    BOB = 1
    EVE = 2


class ClickRecord(NamedTuple):
    timestamp: int
    detector: int
    party: Party


@dataclass
class ClickStream:
    """
    Flujo de clics de un participante en forma columnar.

    timestamps en ticks (int64) y detectores como índice de puerto (int8).
    """

    party: Party
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    detectors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.detectors = np.asarray(self.detectors, dtype=np.int8)
        if self.timestamps.shape != self.detectors.shape:
            raise ValueError("timestamps y detectors deben tener la misma longitud")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @classmethod
    def from_records(cls, records: Iterable[ClickRecord], party: Party) -> "ClickStream":
        records = list(records)
        return cls(
            party=party,
            timestamps=np.array([r.timestamp for r in records], dtype=np.int64),
            detectors=np.array([r.detector for r in records], dtype=np.int8),
        )

    def records(self) -> Iterator[ClickRecord]:
        for t, d in zip(self.timestamps.tolist(), self.detectors.tolist()):
            yield ClickRecord(t, d, self.party)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def sorted(self) -> "ClickStream":
        """Copia ordenada por timestamp (orden estable)."""
        order = np.argsort(self.timestamps, kind="stable")
        return ClickStream(self.party, self.timestamps[order], self.detectors[order])

    def select(self, mask: np.ndarray) -> "ClickStream":
        return ClickStream(self.party, self.timestamps[mask], self.detectors[mask])

    def shifted(self, ticks: int) -> "ClickStream":
        return ClickStream(self.party, self.timestamps + ticks, self.detectors.copy())

    def epochs(self) -> np.ndarray:
        return self.timestamps >> EPOCH_SHIFT

    @classmethod
    def concatenate(cls, streams: list["ClickStream"], party: Party) -> "ClickStream":
        if not streams:
            return cls(party)
        return cls(
            party,
            np.concatenate([s.timestamps for s in streams]),
            np.concatenate([s.detectors for s in streams]),
        )
