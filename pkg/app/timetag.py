"""Épocas, sincronización de relojes, coincidencias e histogramas de tiempos.

Las operaciones son puras sobre flujos inmutables ordenados por timestamp.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from app.config import CoincidenceWindowConfig
from app.errors import SynchronizationError
from app.photonics import PORT_LABELS, Port
from app.timebase import EPOCH_SHIFT, TICK_PS, ClickStream

logger = logging.getLogger(__name__)

# Un pico es significativo si supera este múltiplo del fondo medio
SYNC_SIGNIFICANCE = 5.0
# Cuentas mínimas en el pico de una combinación para estimar su FWHM
MIN_FWHM_COUNTS = 100


def epoch_index(ticks: Union[int, np.ndarray]) -> Union[int, np.ndarray]:
    """Época a la que pertenece un timestamp (2^32 ticks = 2^29 ns)."""
    if isinstance(ticks, np.ndarray):
        return ticks >> EPOCH_SHIFT
    return int(ticks) >> EPOCH_SHIFT


def _pair_differences(ta: np.ndarray, tb: np.ndarray, search_range: int) -> np.ndarray:
    """Todas las diferencias tb − ta dentro de ±search_range."""
    lo = np.searchsorted(tb, ta - search_range, side="left")
    hi = np.searchsorted(tb, ta + search_range, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(ta.size), counts)
    # Posición dentro de cada rango: índice global menos el inicio acumulado del rango
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    b_index = np.repeat(lo, counts) + (np.arange(total) - starts)
    return tb[b_index] - ta[owner]


def synchronize(
    stream_a: ClickStream,
    stream_b: ClickStream,
    search_range: int = 32_768,
    coarse_bin: int = 64,
    fine_bin: int = 1,
) -> int:
    """
    Offset de reloj entre dos flujos por correlación cruzada en dos etapas.

    Args:
        stream_a: Flujo de referencia, ordenado.
        stream_b: Flujo desplazado, ordenado.
        search_range: Offset máximo buscado (ticks, simétrico).
        coarse_bin: Ancho de bin del histograma grueso (ticks).
        fine_bin: Ancho de bin del refinamiento (ticks).

    Returns:
        Offset en ticks tal que t_b ≈ t_a + offset.

    Raises:
        ValueError: Si algún flujo está vacío.
        SynchronizationError: Si no hay un pico significativo.
    """
    if len(stream_a) == 0 or len(stream_b) == 0:
        raise ValueError("synchronize requiere dos flujos no vacíos")

    diffs = _pair_differences(stream_a.timestamps, stream_b.timestamps, search_range)
    if diffs.size == 0:
        raise SynchronizationError("No hay pares de clics dentro del rango de búsqueda")

    # Etapa gruesa
    edges = np.arange(-search_range, search_range + coarse_bin + 1, coarse_bin)
    coarse, _ = np.histogram(diffs, bins=edges)
    peak = int(np.argmax(coarse))
    background = float(coarse.mean())
    if coarse[peak] < SYNC_SIGNIFICANCE * background:
        raise SynchronizationError(
            f"Pico de correlación no significativo ({coarse[peak]} vs fondo {background:.1f})"
        )
    center = int(edges[peak]) + coarse_bin // 2

    # Etapa fina alrededor del pico grueso
    lo, hi = center - 2 * coarse_bin, center + 2 * coarse_bin
    near = diffs[(diffs >= lo) & (diffs < hi)]
    fine_edges = np.arange(lo, hi + fine_bin, fine_bin)
    fine, _ = np.histogram(near, bins=fine_edges)
    others = np.delete(coarse, np.arange(max(0, peak - 2), min(coarse.size, peak + 3)))
    floor = (others.mean() if others.size else 0.0) * fine_bin / coarse_bin
    weights = np.clip(fine - floor, 0.0, None)

    mode = int(np.argmax(fine))
    half = max(1, coarse_bin // (4 * fine_bin))
    sel = slice(max(0, mode - half), min(fine.size, mode + half + 1))
    centers = fine_edges[:-1] + (fine_bin - 1) / 2.0
    if weights[sel].sum() > 0:
        offset = float(np.average(centers[sel], weights=weights[sel]))
    else:
        offset = float(centers[mode])

    result = int(round(offset))
    logger.debug(f"Sincronización: offset={result} ticks (pico {coarse[peak]}, fondo {background:.1f})")
    return result


def match_coincidences(
    stream_a: ClickStream,
    stream_b: ClickStream,
    cfg: CoincidenceWindowConfig,
    offset: int,
) -> np.ndarray:
    """
    Empareja clics uno a uno con un barrido de dos punteros.

    Un par coincide si |t_a − (t_b − offset − calibración)| ≤ half_width. Cada
    clic participa a lo sumo en un par; gana el vecino más cercano y, a igual
    distancia, el clic más temprano.

    Returns:
        Array (n, 2) de índices (index_a, index_b), creciente en ambas columnas.
    """
    ta_all, tb_all = stream_a.timestamps, stream_b.timestamps
    if ta_all.size == 0 or tb_all.size == 0:
        return np.zeros((0, 2), dtype=np.int64)

    half = cfg.half_width_ticks
    margin = half + max(abs(v) for v in cfg.offsets_ticks)
    shifted = tb_all - offset

    # Solo los clics con algún candidato dentro de la ventana ampliada
    lo = np.searchsorted(shifted, ta_all - margin, side="left")
    hi = np.searchsorted(shifted, ta_all + margin, side="right")
    idx_a = np.flatnonzero(hi > lo)
    lo_b = np.searchsorted(ta_all, shifted - margin, side="left")
    hi_b = np.searchsorted(ta_all, shifted + margin, side="right")
    idx_b = np.flatnonzero(hi_b > lo_b)

    ta = ta_all[idx_a].tolist()
    da = stream_a.detectors[idx_a].tolist()
    tb = shifted[idx_b].tolist()
    db = stream_b.detectors[idx_b].tolist()
    offsets = cfg.offsets_ticks

    def distance(i: int, j: int) -> int:
        return ta[i] - (tb[j] - offsets[da[i] * 4 + db[j]])

    pairs: list[tuple[int, int]] = []
    i = j = 0
    na, nb = len(ta), len(tb)
    while i < na and j < nb:
        d = distance(i, j)
        if d > half:
            j += 1
            continue
        if d < -half:
            i += 1
            continue
        # b[j+1] más cerca de a[i]: b[j] queda libre
        if j + 1 < nb and abs(distance(i, j + 1)) < abs(d):
            j += 1
            continue
        # a[i+1] más cerca de b[j]: a[i] queda libre
        if i + 1 < na and abs(distance(i + 1, j)) < abs(d):
            i += 1
            continue
        pairs.append((i, j))
        i += 1
        j += 1

    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    local = np.array(pairs, dtype=np.int64)
    return np.column_stack([idx_a[local[:, 0]], idx_b[local[:, 1]]])


# ==================== HISTOGRAMAS ====================


def combination_label(detector_a: int, detector_b: int) -> str:
    return f"{PORT_LABELS[Port(detector_a)]}|{PORT_LABELS[Port(detector_b)]}"


@dataclass
class CoincidenceHistogram:
    """Histogramas de diferencias de tiempo para las 16 combinaciones de detectores."""

    counts: np.ndarray  # (16, n_bins)
    bin_edges: np.ndarray  # ticks, n_bins + 1, desplazados medio bin
    bin_ticks: int = 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bin_centers_ps(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_ticks / 2.0) * TICK_PS

    def normalized(self) -> np.ndarray:
        """Cada combinación escalada a pico 1 (ceros si está vacía)."""
        peaks = self.counts.max(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(peaks > 0, self.counts / peaks, 0.0)

    def fwhm_ps(self, combination: int) -> Optional[float]:
        """
        FWHM por interpolación lineal en la mitad del máximo.

        Returns:
            Ancho en ps, o None si el pico tiene menos de 100 cuentas.
        """
        row = self.counts[combination].astype(np.float64)
        peak_index = int(np.argmax(row))
        peak = row[peak_index]
        if peak < MIN_FWHM_COUNTS:
            return None
        half = peak / 2.0

        left = peak_index
        while left > 0 and row[left - 1] >= half:
            left -= 1
        if left == 0:
            x_left = 0.0
        else:
            lo, hi = row[left - 1], row[left]
            x_left = (left - 1) + (half - lo) / (hi - lo)

        right = peak_index
        last = row.size - 1
        while right < last and row[right + 1] >= half:
            right += 1
        if right == last:
            x_right = float(last)
        else:
            hi, lo = row[right], row[right + 1]
            x_right = right + (hi - half) / (hi - lo)

        return (x_right - x_left) * self.bin_ticks * TICK_PS

    def fwhm_all(self) -> list[Optional[float]]:
        return [self.fwhm_ps(c) for c in range(self.counts.shape[0])]

    def mean_fwhm_ps(self) -> Optional[float]:
        values = [v for v in self.fwhm_all() if v is not None]
        return float(np.mean(values)) if values else None

    def to_csv(self, path: Path) -> None:
        """Exporta columnas (combination, bin_center_ps, count, normalized)."""
        norm = self.normalized()
        centers = self.bin_centers_ps
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["combination", "bin_center_ps", "count", "normalized"])
            for combo in range(self.counts.shape[0]):
                label = combination_label(combo // 4, combo % 4)
                for k in range(self.counts.shape[1]):
                    writer.writerow(
                        [label, f"{centers[k]:.1f}", int(self.counts[combo, k]), f"{norm[combo, k]:.6f}"]
                    )


def build_histogram(
    pairs: np.ndarray,
    stream_a: ClickStream,
    stream_b: ClickStream,
    cfg: CoincidenceWindowConfig,
    offset: int,
    *,
    half_range_ticks: Optional[int] = None,
    bin_ticks: int = 1,
) -> CoincidenceHistogram:
    """
    Histograma por combinación de t_b − offset − calibración − t_a.

    Args:
        pairs: Salida de match_coincidences.
        stream_a: Flujo de Alice.
        stream_b: Flujo de Bob.
        cfg: Ventana y constantes de calibración.
        offset: Offset de sincronización.
        half_range_ticks: Rango del histograma (por defecto, el de la ventana).
        bin_ticks: Ancho de bin.
    """
    half_range = cfg.half_width_ticks if half_range_ticks is None else half_range_ticks
    # Bins centrados en múltiplos de bin_ticks: −16.5 … 16.5 para la ventana por defecto
    edges = np.arange(-half_range, half_range + 2 * bin_ticks, bin_ticks) - bin_ticks / 2.0
    counts = np.zeros((16, edges.size - 1), dtype=np.int64)
    if pairs.size:
        ia, ib = pairs[:, 0], pairs[:, 1]
        det_a = stream_a.detectors[ia].astype(np.int64)
        det_b = stream_b.detectors[ib].astype(np.int64)
        combo = det_a * 4 + det_b
        calibration = np.asarray(cfg.offsets_ticks, dtype=np.int64)[combo]
        diffs = stream_b.timestamps[ib] - offset - calibration - stream_a.timestamps[ia]
        for c in range(16):
            counts[c], _ = np.histogram(diffs[combo == c], bins=edges)
    return CoincidenceHistogram(counts=counts, bin_edges=edges, bin_ticks=bin_ticks)
