"""Estimación de QBER, corrección de errores Cascade y amplificación de privacidad.

Toda la aleatoriedad se deriva de semillas anunciadas en el canal público,
así que cualquiera que tenga la clave de Bob y la transcripción puede repetir
el cálculo de Bob bit a bit.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from app.config import BlockSchedule, EcConfig, PaConfig
from app.errors import NoKeyPossible, ProtocolError

logger = logging.getLogger(__name__)

HASH_BYTES = 8


def binary_entropy(q: float) -> float:
    """h₂(q) en bits; 0 en los extremos."""
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return -q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q)


def _generator(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


# ==================== QBER ====================


@dataclass
class QberEstimate:
    q_est: float
    errors: int
    sampled: int
    sample_indices: np.ndarray
    alice_key: np.ndarray  # bits restantes tras retirar la muestra
    bob_key: np.ndarray


def qber_sample_indices(n: int, sample_fraction: float, seed: int) -> np.ndarray:
    """Posiciones (ordenadas) de la muestra pública derivada de la semilla."""
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    return sample_positions(n, min(n, max(1, int(round(n * sample_fraction)))), seed)


def sample_positions(n: int, size: int, seed: int) -> np.ndarray:
    """Muestra de tamaño conocido; permite reconstruirla a partir de QBER_SAMPLE."""
    if size > n or size < 0:
        raise ProtocolError(f"Muestra de {size} bits en una clave de {n}")
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(_generator(seed, 0).choice(n, size=size, replace=False)).astype(np.int64)


def remove_indices(key: np.ndarray, indices: np.ndarray) -> np.ndarray:
    keep = np.ones(key.size, dtype=bool)
    keep[indices] = False
    return key[keep]


def estimate_qber(
    alice_key: np.ndarray,
    bob_key: np.ndarray,
    sample_fraction: float,
    rng_seed: int,
) -> QberEstimate:
    """
    Fracción de discrepancias en una muestra anunciada públicamente.

    Los bits muestreados se retiran de ambas claves.

    Raises:
        ProtocolError: Si las claves tienen longitudes distintas.
    """
    if alice_key.size != bob_key.size:
        raise ProtocolError(
            f"Longitudes de clave distintas: Alice {alice_key.size}, Bob {bob_key.size}"
        )
    indices = qber_sample_indices(alice_key.size, sample_fraction, rng_seed)
    errors = int(np.count_nonzero(alice_key[indices] != bob_key[indices]))
    sampled = int(indices.size)
    return QberEstimate(
        q_est=errors / sampled if sampled else 0.0,
        errors=errors,
        sampled=sampled,
        sample_indices=indices,
        alice_key=remove_indices(alice_key, indices),
        bob_key=remove_indices(bob_key, indices),
    )


# ==================== CASCADE ====================


def initial_block_size(q_est: float, cfg: EcConfig, n: int) -> int:
    """k₁ = max(min_block, ⌊block_factor / q⌋), acotado por la longitud de la clave."""
    if n <= 0:
        return 1
    if q_est <= 0:
        return n
    return max(1, min(n, max(cfg.min_block, int(cfg.block_factor / q_est))))


def block_sizes(q_est: float, cfg: EcConfig, n: int) -> list[int]:
    """
    Tamaño de bloque de cada pasada según el calendario configurado.

    Con ``halving`` (por defecto) q_est no interviene: 64, 32, 16, 8.
    """
    if n <= 0:
        return [1] * cfg.passes
    if cfg.schedule is BlockSchedule.HALVING:
        sizes = [max(cfg.min_block, cfg.initial_block >> p) for p in range(cfg.passes)]
    else:
        k1 = initial_block_size(q_est, cfg, n)
        sizes = [k1 << p for p in range(cfg.passes)]
    return [max(1, min(n, size)) for size in sizes]


def cascade_permutation(seed: int, pass_index: int, n: int) -> np.ndarray:
    return _generator(seed, 1, pass_index).permutation(n)


def _prefix_parity(bits: np.ndarray) -> np.ndarray:
    """prefix[i] = XOR de bits[:i]."""
    out = np.zeros(bits.size + 1, dtype=np.uint8)
    if bits.size:
        out[1:] = np.bitwise_xor.accumulate(bits.astype(np.uint8))
    return out


def _range_parity(prefixes: list[np.ndarray], q: int, s: int, e: int) -> int:
    return int(prefixes[q][e] ^ prefixes[q][s])


def _block_bounds(n: int, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(0, n, block_size, dtype=np.int64)
    return starts, np.minimum(starts + block_size, n)


@dataclass
class PassAnnouncement:
    seed: int
    block_size: int
    parities: np.ndarray


class ParityOracle(Protocol):
    """Fuente de las paridades de Alice vista desde Bob (o desde quien le imite)."""

    def open_pass(self, pass_index: int) -> PassAnnouncement: ...

    def query(self, queries: list[tuple[int, int, int]]) -> np.ndarray: ...

    def finish_pass(self, pass_index: int) -> None: ...


class CascadeResponder:
    """Lado de Alice: anuncia paridades de bloque y responde consultas en O(1)."""

    def __init__(self, key: np.ndarray, seed: int, sizes: Sequence[int]) -> None:
        self.key = np.asarray(key, dtype=np.uint8)
        self.seed = seed
        self.sizes = list(sizes)
        self._prefix: dict[int, np.ndarray] = {}

    @property
    def passes(self) -> int:
        return len(self.sizes)

    def _prefix_for(self, pass_index: int) -> np.ndarray:
        if pass_index not in self._prefix:
            if not 0 <= pass_index < self.passes:
                raise ProtocolError(f"Pasada fuera de rango: {pass_index}")
            perm = cascade_permutation(self.seed, pass_index, self.key.size)
            self._prefix[pass_index] = _prefix_parity(self.key[perm])
        return self._prefix[pass_index]

    def announce(self, pass_index: int) -> PassAnnouncement:
        n = self.key.size
        prefix = self._prefix_for(pass_index)
        block_size = self.sizes[pass_index]
        starts, ends = _block_bounds(n, block_size)
        return PassAnnouncement(self.seed, block_size, prefix[ends] ^ prefix[starts])

    def answer(self, queries: list[tuple[int, int, int]]) -> np.ndarray:
        n = self.key.size
        out = np.empty(len(queries), dtype=np.uint8)
        for i, (pass_index, start, end) in enumerate(queries):
            if not 0 <= start < end <= n:
                raise ProtocolError(f"Consulta fuera de rango: [{start}, {end}) con n={n}")
            prefix = self._prefix_for(pass_index)
            out[i] = prefix[end] ^ prefix[start]
        return out


class LocalParityOracle:
    """Oráculo directo sobre un CascadeResponder (sin canal)."""

    def __init__(self, responder: CascadeResponder) -> None:
        self.responder = responder
        self.queries: list[list[tuple[int, int, int]]] = []

    def open_pass(self, pass_index: int) -> PassAnnouncement:
        return self.responder.announce(pass_index)

    def query(self, queries: list[tuple[int, int, int]]) -> np.ndarray:
        self.queries.append(list(queries))
        return self.responder.answer(queries)

    def finish_pass(self, pass_index: int) -> None:
        return None


@dataclass
class CascadeResult:
    corrected: np.ndarray
    leaked_bits: int
    corrections: int
    rounds: int


def cascade_correct(key: np.ndarray, oracle: ParityOracle, passes: int) -> CascadeResult:
    """
    Corrige la clave de Bob contra las paridades de Alice.

    En cada pasada Alice anuncia las paridades de todos los bloques. Si en la
    primera pasada coinciden todas, Cascade termina ahí. Los bloques impares
    de todas las pasadas abiertas se bisecan en paralelo (una ronda de
    consultas por nivel) y cada bit corregido reabre los bloques que lo
    contienen en las demás pasadas. Las paridades ya conocidas de Alice se
    reutilizan sin volver a preguntar.

    Args:
        key: Clave de Bob (bits 0/1).
        oracle: Fuente de las paridades de Alice.
        passes: Número de pasadas.

    Returns:
        CascadeResult con la clave corregida y los bits de paridad revelados.
    """
    work = np.asarray(key, dtype=np.uint8).copy()
    n = work.size
    perms: list[np.ndarray] = []
    bounds: list[tuple[np.ndarray, np.ndarray]] = []
    alice_top: list[np.ndarray] = []
    known: dict[tuple[int, int, int], int] = {}
    leaked = corrections = rounds = 0

    for pass_index in range(passes):
        announcement = oracle.open_pass(pass_index)
        if n == 0:
            oracle.finish_pass(pass_index)
            break

        starts, ends = _block_bounds(n, announcement.block_size)
        if announcement.parities.size != starts.size:
            raise ProtocolError(
                f"Pasada {pass_index}: {announcement.parities.size} paridades para {starts.size} bloques"
            )
        perms.append(cascade_permutation(announcement.seed, pass_index, n))
        bounds.append((starts, ends))
        alice_top.append(announcement.parities.astype(np.uint8))
        for s, e, parity in zip(starts.tolist(), ends.tolist(), announcement.parities.tolist()):
            known[(pass_index, s, e)] = int(parity)
        leaked += int(announcement.parities.size)

        active: dict[tuple[int, int], tuple[int, int]] = {}
        while True:
            prefixes = [_prefix_parity(work[perm]) for perm in perms]

            for slot, (s, e) in list(active.items()):
                if _range_parity(prefixes, slot[0], s, e) == known[(slot[0], s, e)]:
                    del active[slot]
            for q, (q_starts, q_ends) in enumerate(bounds):
                bob_top = prefixes[q][q_ends] ^ prefixes[q][q_starts]
                for t in np.flatnonzero(bob_top != alice_top[q]).tolist():
                    if (q, t) not in active:
                        active[(q, t)] = (int(q_starts[t]), int(q_ends[t]))
            if not active:
                break

            queries: list[tuple[int, int, int]] = []
            for slot, (s, e) in active.items():
                q = slot[0]
                while e - s > 1:
                    mid = (s + e) // 2
                    left = known.get((q, s, mid))
                    if left is None:
                        break
                    if _range_parity(prefixes, q, s, mid) != left:
                        e = mid
                    else:
                        known.setdefault((q, mid, e), known[(q, s, e)] ^ left)
                        s = mid
                active[slot] = (s, e)
                if e - s > 1:
                    queries.append((q, s, (s + e) // 2))

            singles = sorted(
                {int(perms[slot[0]][s]) for slot, (s, e) in active.items() if e - s == 1}
            )
            if singles:
                work[singles] ^= 1
                corrections += len(singles)
                continue

            answers = oracle.query(queries)
            rounds += 1
            leaked += len(queries)
            for (q, s, mid), parity in zip(queries, answers.tolist()):
                known[(q, s, mid)] = int(parity)

        oracle.finish_pass(pass_index)
        # Paridades de la primera pasada todas iguales: no se abren más pasadas
        if pass_index == 0 and corrections == 0:
            break

    logger.debug(
        f"Cascade: n={n}, pasadas={passes}, correcciones={corrections}, "
        f"rondas={rounds}, bits revelados={leaked}"
    )
    return CascadeResult(work, leaked, corrections, rounds)


def verification_hash(bits: np.ndarray, seed: int) -> bytes:
    """BLAKE2b de 64 bits con clave derivada de la semilla anunciada."""
    bits = np.asarray(bits, dtype=np.uint8)
    digest = hashlib.blake2b(digest_size=HASH_BYTES, key=seed.to_bytes(8, "little"))
    digest.update(bits.size.to_bytes(8, "little"))
    digest.update(np.packbits(bits, bitorder="little").tobytes())
    return digest.digest()


# ==================== AMPLIFICACIÓN DE PRIVACIDAD ====================


def pa_output_length(n: int, q_est: float, leaked_bits: int, cfg: PaConfig) -> int:
    """⌊n·(1 − h₂(q)) − leaked − margen⌋."""
    return int(math.floor(n * (1.0 - binary_entropy(q_est)) - leaked_bits - cfg.safety_margin_bits))


def toeplitz_seed_bits(seed: int, n: int, m: int) -> np.ndarray:
    """Los n + m − 1 bits que definen la matriz de Toeplitz m×n."""
    return _generator(seed, 2).integers(0, 2, n + m - 1, dtype=np.uint8)


def toeplitz_matrix(seed: int, n: int, m: int) -> np.ndarray:
    """Matriz densa T[i, j] = t[i − j + n − 1] (solo para claves pequeñas)."""
    t = toeplitz_seed_bits(seed, n, m)
    i = np.arange(m)[:, None]
    j = np.arange(n)[None, :]
    return t[i - j + n - 1]


def toeplitz_hash(key: np.ndarray, m: int, seed: int) -> np.ndarray:
    """
    Producto T·key sobre GF(2) por convolución FFT.

    y_i = Σ_j t[i − j + n − 1]·x_j, que es la convolución t * x evaluada en n − 1 + i.
    """
    x = np.asarray(key, dtype=np.uint8)
    n = x.size
    if m <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    t = toeplitz_seed_bits(seed, n, m)
    size = t.size + n - 1
    nfft = 1 << (size - 1).bit_length()
    spectrum = np.fft.rfft(t.astype(np.float64), nfft) * np.fft.rfft(x.astype(np.float64), nfft)
    conv = np.rint(np.fft.irfft(spectrum, nfft)[n - 1 : n - 1 + m]).astype(np.int64)
    return (conv & 1).astype(np.uint8)


def privacy_amplify(
    key: np.ndarray,
    leaked_bits: int,
    q_est: float,
    cfg: PaConfig,
    seed: int,
    output_length: Optional[int] = None,
) -> np.ndarray:
    """
    Comprime la clave corregida con un hash de Toeplitz sembrado.

    Args:
        key: Clave corregida (idéntica en Alice y Bob).
        leaked_bits: Bits revelados durante la corrección.
        q_est: QBER estimado.
        cfg: Margen de seguridad.
        seed: Semilla anunciada en PA_SEED.
        output_length: Longitud anunciada; si es None se calcula con la regla.

    Raises:
        NoKeyPossible: Si la longitud de salida es ≤ 0.
    """
    m = pa_output_length(key.size, q_est, leaked_bits, cfg) if output_length is None else output_length
    if m <= 0:
        raise NoKeyPossible(
            f"Sin clave posible: n={key.size}, q={q_est:.4f}, revelados={leaked_bits}"
        )
    return toeplitz_hash(key, m, seed)
