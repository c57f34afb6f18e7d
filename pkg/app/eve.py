"""Eve: réplica interceptora de Bob, generador de estados falsos y extracción offline.

Eve tiene dos partes. En línea, mide cada fotón con una copia del receptor de
Bob y reenvía un pulso brillante que obliga al detector equivalente de Bob
(cegado) a hacer clic. Fuera de línea, con la escucha del canal clásico y sus
propios clics, reconstruye la clave tamizada de Bob y repite su corrección de
errores y amplificación de privacidad.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from app.config import CoincidenceWindowConfig, FsgConfig, PrepulseMode
from app.detector import (
    ApdMode,
    ApdState,
    ThresholdProfile,
    blinded_response,
    geiger_detect,
    update_blinding,
)
from app.errors import (
    CalibrationError,
    ConfigurationError,
    ExtractionAbort,
    ProtocolError,
    SynchronizationError,
)
from app.frames import (
    Abort,
    BlockStart,
    EcParityKind,
    FrameType,
    PaSeedPayload,
    ProtocolFrame,
    QberSample,
    VerifyHash,
    parse_payload,
)
from app.photonics import (
    PORT_BASIS,
    PORT_BIT,
    PORT_POLARIZATION,
    PolarizationState,
    Port,
    sample_port,
    split_powers,
)
from app.protocol import SiftedKey
from app.reconciliation import (
    PassAnnouncement,
    cascade_correct,
    remove_indices,
    sample_positions,
    toeplitz_hash,
    verification_hash,
)
from app.timebase import EPOCH_SHIFT, TICKS_PER_NS, ClickRecord, ClickStream, Party, ns_to_ticks
from app.timetag import match_coincidences, synchronize
from app.transport import CapturedFrame

logger = logging.getLogger(__name__)

# Separación de los pulsos de calibración aislados (sin cross-talk ni tiempo muerto)
ISOLATED_SPACING_NS = 10_000.0
# Fracción máxima de confirmaciones sin clic de origen antes de abortar
MAX_UNMAPPED_FRACTION = 1e-3


# ==================== INTERCEPCIÓN ====================


@dataclass(frozen=True)
class Photon:
    arrival_time: int
    polarization: PolarizationState


def intercept(
    photon: Photon,
    detectors: Sequence[ApdState],
    rng: np.random.Generator,
    *,
    port: Optional[int] = None,
    u: Optional[float] = None,
) -> Optional[tuple[Port, ClickRecord]]:
    """
    Mide un fotón de Alice con la réplica del receptor de Bob.

    Args:
        photon: Fotón con su tiempo de llegada a Eve.
        detectors: Los 4 detectores de Eve (modo Geiger).
        rng: Generador para el puerto, la eficiencia y el jitter.
        port: Puerto ya muestreado por el llamador.
        u: Sorteo de eficiencia ya realizado por el llamador.

    Returns:
        (puerto, clic) o None si el fotón se pierde.

    Raises:
        ValueError: Si algún detector de Eve está cegado.
    """
    if any(d.mode is not ApdMode.GEIGER for d in detectors):
        raise ValueError("Los detectores de Eve deben estar en modo Geiger")
    if port is None:
        port = sample_port(photon.polarization, rng).index
    click = geiger_detect(detectors[port], photon.arrival_time, rng, u=u)
    if click is None:
        return None
    return Port(port), click


class Interceptor:
    """Réplica de Bob con el tiempo de rearme del FSG entre clics registrados."""

    def __init__(self, detectors: list[ApdState], min_spacing_ns: float) -> None:
        self.detectors = detectors
        self.min_spacing_ticks = ns_to_ticks(min_spacing_ns)
        self.last_registered: Optional[int] = None
        self.registered = 0
        self.suppressed = 0

    def _admit(self, click: ClickRecord) -> bool:
        if (
            self.last_registered is not None
            and click.timestamp - self.last_registered < self.min_spacing_ticks
        ):
            self.suppressed += 1
            return False
        self.last_registered = click.timestamp
        self.registered += 1
        return True

    def intercept(
        self,
        photon: Photon,
        rng: np.random.Generator,
        *,
        port: Optional[int] = None,
        u: Optional[float] = None,
    ) -> Optional[tuple[Port, ClickRecord]]:
        hit = intercept(photon, self.detectors, rng, port=port, u=u)
        if hit is None or not self._admit(hit[1]):
            return None
        return hit

    def admit_dark_count(self, click: ClickRecord) -> bool:
        """Una cuenta oscura de Eve también dispara un estado falso si el FSG está armado."""
        return self._admit(click)


# ==================== GENERADOR DE ESTADOS FALSOS ====================


@dataclass(frozen=True)
class FakedState:
    """Tren de pulsos enviado a Bob por un clic de Eve. Potencias referidas a los diodos de Bob."""

    target: Port
    eve_click_time: int
    arrival_time: int
    prepulse_time: Optional[int]
    trigger_power_w: float
    peak_at_port: np.ndarray
    cw_at_port: np.ndarray


class FakedStateGenerator:
    """
    Diseña los estados falsos a partir de la configuración del FSG y de los
    umbrales de Bob obtenidos en la calibración.

    El pulso de disparo lleva la polarización del puerto objetivo y un pico de
    ``peak_factor`` veces el p_always del objetivo a su potencia c.w.
    instantánea, de modo que el objetivo recibe exactamente p_always y los
    puertos de la base conjugada la mitad.
    """

    def __init__(
        self,
        cfg: FsgConfig,
        bob_profiles: Sequence[ThresholdProfile],
        *,
        downstream_delay_ticks: int = 0,
    ) -> None:
        if len(bob_profiles) != 4:
            raise ValueError("Se necesitan los umbrales de los 4 detectores de Bob")
        self.cfg = cfg
        self.profiles = list(bob_profiles)
        self.downstream_delay_ticks = downstream_delay_ticks
        self.blinding_polarization = (
            PolarizationState.from_stokes(*cfg.blinding.polarization)
            if cfg.blinding.power_w > 0
            else PolarizationState.right_circular()
        )
        self.blinding_cw = split_powers(self.blinding_polarization, cfg.blinding.power_w)
        self.trim_ticks = np.zeros(4, dtype=np.int64)
        self.sent = 0
        self._designs = [self._design(target) for target in Port]

    def prepulse_cw(self, target: Port) -> np.ndarray:
        """Potencia que el pre-pulso suma en cada puerto mientras dura el disparo."""
        pre = self.cfg.prepulse
        if not pre.enabled or pre.peak_power_w <= 0 or pre.lead_ns >= pre.duration_ns:
            return np.zeros(4)
        pol = PORT_POLARIZATION[target]
        if pre.mode is PrepulseMode.ORTHOGONAL:
            pol = pol.orthogonal()
        return split_powers(pol, pre.peak_power_w)

    def _design(self, target: Port) -> tuple[np.ndarray, float, np.ndarray]:
        cw = self.blinding_cw + self.prepulse_cw(target)
        _, p_always = self.profiles[target].thresholds(float(cw[target]))
        total = self.cfg.trigger.peak_factor * p_always
        return cw, total, split_powers(PORT_POLARIZATION[target], total)

    def base_latency_ticks(self, port: int) -> int:
        return (
            ns_to_ticks(self.cfg.insertion_delay_ns + self.cfg.channel_delays_ns[port])
            + self.downstream_delay_ticks
        )

    def latency_ticks(self, port: int) -> int:
        """Del clic de Eve a la llegada del disparo a Bob, con el recorte calibrado."""
        return self.base_latency_ticks(port) + int(self.trim_ticks[port])

    def latency_spread_ticks(self) -> int:
        latencies = [self.latency_ticks(p) for p in Port]
        return max(latencies) - min(latencies)

    def synthesize_faked_state(self, port: int, click_time: int) -> FakedState:
        """Tren de pulsos para un clic de Eve en ``port`` a ``click_time``."""
        target = Port(port)
        cw, total, peaks = self._designs[target]
        arrival = click_time + self.latency_ticks(target)
        pre = self.cfg.prepulse
        prepulse_time = arrival - ns_to_ticks(pre.lead_ns) if pre.enabled else None
        self.sent += 1
        return FakedState(target, click_time, arrival, prepulse_time, total, peaks, cw)


def apply_faked_state(
    state: FakedState,
    detectors: Sequence[ApdState],
    rng: np.random.Generator,
) -> list[ClickRecord]:
    """
    Respuesta de los 4 detectores de Bob a un estado falso.

    Un único sorteo uniforme decide la rampa de los cuatro detectores (la
    fluctuación de amplitud del pulso es común). Un detector que siguiera en
    Geiger hace clic con cualquier pulso brillante.
    """
    u = float(rng.random())
    clicks: list[ClickRecord] = []
    t = state.arrival_time
    for det in detectors:
        peak = float(state.peak_at_port[det.port])
        if det.mode is ApdMode.GEIGER:
            click = geiger_detect(det, t, rng, u=0.0) if peak > 0 else None
        else:
            blinding = det.cw_power_at_diode
            update_blinding(det, float(state.cw_at_port[det.port]))
            interval = None if det.last_pulse_time is None else (t - det.last_pulse_time) / TICKS_PER_NS
            click = blinded_response(det, peak, t, interval, rng, u=u)
            update_blinding(det, blinding)
        if click is not None:
            clicks.append(click)
    return clicks


def run_blinding(
    bob_detectors: Sequence[ApdState],
    fsg_cfg: FsgConfig,
    *,
    strict: bool = True,
) -> list[Port]:
    """
    Enciende el láser c.w. de cegado sobre los detectores de Bob.

    Returns:
        Puertos que quedan en modo Geiger (vacío si el cegado es completo).

    Raises:
        ConfigurationError: En modo estricto, si algún puerto recibe menos potencia
            que su umbral de cegado.
    """
    power = fsg_cfg.blinding.power_w
    if power > 0:
        pol = PolarizationState.from_stokes(*fsg_cfg.blinding.polarization)
        per_port = split_powers(pol, power)
    else:
        per_port = np.zeros(4)

    for det in bob_detectors:
        update_blinding(det, float(max(per_port[det.port], 0.0)))
    geiger = [Port(d.port) for d in bob_detectors if d.mode is ApdMode.GEIGER]

    if geiger:
        labels = ", ".join(p.label for p in geiger)
        if strict:
            raise ConfigurationError(
                f"Potencia de cegado insuficiente en los puertos {labels} "
                f"({power * 1e12:.1f} pW en total)"
            )
        logger.warning(f"Cegado incompleto: puertos {labels} siguen en modo Geiger")
    else:
        logger.info(f"Bob cegado: {power * 1e12:.1f} pW ({per_port[0] * 1e12:.1f} pW en V)")
    return geiger


# ==================== FIDELIDAD Y CALIBRACIÓN ====================


@dataclass
class FidelityMatrix:
    """Clics simples de Bob por (puerto objetivo, detector), más dobles y ausencias."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))
    sent: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    double_clicks: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    no_clicks: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))

    def record(self, target: int, clicked: Sequence[int]) -> None:
        self.sent[target] += 1
        ports = set(int(p) for p in clicked)
        if not ports:
            self.no_clicks[target] += 1
        elif len(ports) == 1:
            self.counts[target, ports.pop()] += 1
        else:
            self.double_clicks[target] += 1

    @property
    def total_sent(self) -> int:
        return int(self.sent.sum())

    @property
    def off_diagonal(self) -> int:
        return int(self.counts.sum() - np.trace(self.counts))

    @property
    def total_double_clicks(self) -> int:
        return int(self.double_clicks.sum())

    def diagonal_fractions(self) -> list[Optional[float]]:
        return [
            float(self.counts[p, p] / self.sent[p]) if self.sent[p] else None for p in range(4)
        ]

    def double_click_rate(self) -> float:
        return self.total_double_clicks / self.total_sent if self.total_sent else 0.0

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "sent": self.sent.tolist(),
            "double_clicks": self.double_clicks.tolist(),
            "no_clicks": self.no_clicks.tolist(),
            "diagonal_fractions": self.diagonal_fractions(),
            "off_diagonal": self.off_diagonal,
            "double_click_rate": self.double_click_rate(),
        }


@dataclass
class CalibrationReport:
    fidelity: FidelityMatrix
    trims_ticks: np.ndarray
    mean_latency_ticks: np.ndarray
    spread_ticks: int


def calibrate(
    generator: FakedStateGenerator,
    bob_detectors: Sequence[ApdState],
    rng: np.random.Generator,
    *,
    pulses_per_port: int = 2000,
    rate_hz: Optional[float] = None,
    trim: bool = True,
) -> CalibrationReport:
    """
    Barrido de estados falsos en modo diagnóstico y recorte de retardos.

    Args:
        generator: FSG a calibrar (se ajustan sus ``trim_ticks``).
        bob_detectors: Detectores de Bob ya cegados; se modifican, así que en
            una sesión se pasa una copia.
        rng: Generador.
        pulses_per_port: Pulsos enviados a cada puerto.
        rate_hz: None para pulsos aislados en ronda; si no, llegadas de Poisson
            a esa tasa con la separación mínima del FSG y objetivos aleatorios.
        trim: Iguala las latencias al máximo medido (resolución de 1 tick).

    Raises:
        ValueError: Si Bob no está cegado.
        CalibrationError: Si algún clic simple cae fuera del detector objetivo.
    """
    if any(d.mode is not ApdMode.BLINDED for d in bob_detectors):
        raise ValueError("La calibración requiere a Bob cegado")

    fidelity = FidelityMatrix()
    latency_sum = np.zeros(4, dtype=np.float64)
    latency_count = np.zeros(4, dtype=np.int64)
    total = 4 * pulses_per_port
    min_gap = ns_to_ticks(generator.cfg.min_spacing_ns)

    if rate_hz is None:
        targets = np.tile(np.arange(4), pulses_per_port)
        gaps = np.full(total, ns_to_ticks(ISOLATED_SPACING_NS), dtype=np.int64)
    else:
        targets = rng.permutation(np.repeat(np.arange(4), pulses_per_port))
        mean_gap = TICKS_PER_NS * 1e9 / rate_hz
        gaps = min_gap + np.rint(rng.exponential(mean_gap, total)).astype(np.int64)

    t = 0
    for target, gap in zip(targets.tolist(), gaps.tolist()):
        t += gap
        fake = generator.synthesize_faked_state(target, t)
        clicks = apply_faked_state(fake, bob_detectors, rng)
        fidelity.record(target, [c.detector for c in clicks])
        if len(clicks) == 1 and clicks[0].detector == target:
            latency_sum[target] += clicks[0].timestamp - t
            latency_count[target] += 1

    if fidelity.off_diagonal:
        logger.error(f"Calibración fallida: {fidelity.off_diagonal} clics fuera de la diagonal")
        raise CalibrationError(
            f"{fidelity.off_diagonal} clics fuera de la diagonal: {fidelity.counts.tolist()}"
        )

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_latency = np.where(latency_count > 0, latency_sum / latency_count, np.nan)
    trims = np.zeros(4, dtype=np.int64)
    if trim and np.all(latency_count > 0):
        trims = np.rint(mean_latency.max() - mean_latency).astype(np.int64)
        generator.trim_ticks = generator.trim_ticks + trims

    spread = generator.latency_spread_ticks()
    logger.info(
        f"Calibración FSG: diagonal={fidelity.diagonal_fractions()}, "
        f"dobles={fidelity.total_double_clicks}, recortes={trims.tolist()}, dispersión={spread} ticks"
    )
    return CalibrationReport(fidelity, trims, mean_latency, spread)


# ==================== ESCUCHA Y EXTRACCIÓN ====================


@dataclass
class WiretapLog:
    """Copia pasiva de todo el canal clásico, en orden de entrega, más los clics de Eve."""

    frames: list[CapturedFrame] = field(default_factory=list)
    eve_clicks: ClickStream = field(default_factory=lambda: ClickStream(Party.EVE))

    def capture(self, captured: CapturedFrame) -> None:
        self.frames.append(captured)

    def decoded(self) -> list[ProtocolFrame]:
        return [c.frame for c in sorted(self.frames, key=lambda c: c.sequence)]


class TranscriptParityOracle:
    """
    Oráculo de Cascade que responde con las paridades grabadas de Alice.

    Exige que cada consulta coincida con la grabada: si la réplica se desvía
    de lo que hizo Bob, lanza ProtocolError.
    """

    def __init__(self, frames: Sequence[ProtocolFrame]) -> None:
        self._frames = deque(
            f for f in frames if f.type in (FrameType.EC_PARITY, FrameType.EC_REPLY)
        )
        self.seed: Optional[int] = None

    def _next(self, frame_type: FrameType):
        if not self._frames:
            raise ProtocolError("La transcripción de Cascade se agotó antes de tiempo")
        frame = self._frames.popleft()
        if frame.type is not frame_type:
            raise ProtocolError(f"Se esperaba {frame_type.name} en la transcripción, hay {frame.type.name}")
        return parse_payload(frame)

    def open_pass(self, pass_index: int) -> PassAnnouncement:
        payload = self._next(FrameType.EC_PARITY)
        if payload.kind is not EcParityKind.BLOCKS or payload.pass_index != pass_index:
            raise ProtocolError(f"Anuncio de pasada {pass_index} ausente en la transcripción")
        self.seed = payload.seed
        return PassAnnouncement(payload.seed, payload.block_size, payload.parities)

    def query(self, queries: list[tuple[int, int, int]]) -> np.ndarray:
        recorded = self._next(FrameType.EC_REPLY)
        if recorded.queries != [tuple(q) for q in queries]:
            raise ProtocolError("La réplica de Cascade diverge de las consultas grabadas")
        answers = self._next(FrameType.EC_PARITY)
        if answers.kind is not EcParityKind.ANSWERS:
            raise ProtocolError("Se esperaban respuestas de paridad")
        return answers.parities

    def finish_pass(self, pass_index: int) -> None:
        recorded = self._next(FrameType.EC_REPLY)
        if recorded.queries:
            raise ProtocolError(f"La pasada {pass_index} no termina donde la grabada")


@dataclass
class BlockReplay:
    first_epoch: int
    num_epochs: int
    final: Optional[np.ndarray]
    verified: bool
    sample_mismatches: int


def replay_block(key: np.ndarray, frames: Sequence[ProtocolFrame]) -> BlockReplay:
    """
    Repite el procesamiento de Bob para un bloque a partir de su transcripción.

    Args:
        key: Clave tamizada del bloque, supuesta igual a la de Bob.
        frames: Frames del bloque, de BLOCK_START a PA_SEED inclusive.

    Raises:
        ProtocolError: Si la transcripción está incompleta o la réplica diverge.
    """
    ctl = [parse_payload(f) for f in frames if f.type is FrameType.SESSION_CTL]
    start = next((c for c in ctl if isinstance(c, BlockStart)), None)
    sample = next((c for c in ctl if isinstance(c, QberSample)), None)
    verify = next((c for c in ctl if isinstance(c, VerifyHash)), None)
    pa_frames = [f for f in frames if f.type is FrameType.PA_SEED]
    if start is None or sample is None or not pa_frames:
        raise ProtocolError("Transcripción de bloque incompleta")

    indices = sample_positions(key.size, sample.bits.size, sample.seed)
    mismatches = int(np.count_nonzero(key[indices] != sample.bits))
    rest = remove_indices(key, indices)

    if verify is None:
        # Bloque descartado por QBER: no hubo Cascade ni clave final
        pa_discard: PaSeedPayload = parse_payload(pa_frames[0])
        if pa_discard.output_length != 0:
            raise ProtocolError("PA_SEED con salida pero sin hash de verificación")
        return BlockReplay(
            start.first_epoch, start.num_epochs, np.zeros(0, dtype=np.uint8), True, mismatches
        )

    passes = sum(
        1
        for f in frames
        if f.type is FrameType.EC_PARITY and parse_payload(f).kind is EcParityKind.BLOCKS
    )
    oracle = TranscriptParityOracle(frames)
    result = cascade_correct(rest, oracle, passes)
    verified = oracle.seed is not None and verification_hash(result.corrected, oracle.seed) == verify.digest

    pa: PaSeedPayload = parse_payload(pa_frames[0])
    if pa.input_length != rest.size:
        raise ProtocolError(f"PA_SEED anuncia {pa.input_length} bits y la réplica tiene {rest.size}")
    final = toeplitz_hash(result.corrected, pa.output_length, pa.seed)
    return BlockReplay(start.first_epoch, start.num_epochs, final, verified, mismatches)


@dataclass
class ExtractionResult:
    eve_sifted: SiftedKey
    final_blocks: dict[int, np.ndarray]
    sync_offset: Optional[int]
    confirmations: int
    unmapped: int
    sample_mismatches: int = 0
    verified_blocks: int = 0
    failed_blocks: list[int] = field(default_factory=list)

    @property
    def unmapped_fraction(self) -> float:
        return self.unmapped / self.confirmations if self.confirmations else 0.0

    def final_key(self) -> np.ndarray:
        blocks = [self.final_blocks[k] for k in sorted(self.final_blocks)]
        return np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.uint8)


def _split_blocks(frames: Sequence[ProtocolFrame]) -> list[list[ProtocolFrame]]:
    """Agrupa los frames de procesamiento de cada bloque; un ABORT cierra el último."""
    blocks: list[list[ProtocolFrame]] = []
    current: Optional[list[ProtocolFrame]] = None
    for frame in frames:
        if frame.type in (FrameType.TIMING, FrameType.SIFT_ACK):
            continue
        if frame.type is FrameType.SESSION_CTL:
            payload = parse_payload(frame)
            if isinstance(payload, BlockStart):
                current = [frame]
                continue
            if isinstance(payload, Abort):
                current = None
                continue
        if current is None:
            continue
        current.append(frame)
        if frame.type is FrameType.PA_SEED:
            blocks.append(current)
            current = None
    return blocks


def extract_key(
    wiretap: WiretapLog,
    eve_clicks: Optional[ClickStream] = None,
    *,
    window: Optional[CoincidenceWindowConfig] = None,
) -> ExtractionResult:
    """
    Reconstruye la clave tamizada y final de Bob con datos públicos y los clics propios.

    Sincroniza sus clics con los tiempos de TIMING, asigna a cada confirmación
    de SIFT_ACK el clic de Eve que la originó y repite bloque a bloque la
    estimación de QBER, Cascade y la amplificación de privacidad.

    Raises:
        ExtractionAbort: Si más del 0.1 % de las confirmaciones no tienen clic de
            origen o no hay correlación entre los clics de Eve y los de Bob.
    """
    window = window or CoincidenceWindowConfig()
    eve = eve_clicks if eve_clicks is not None else wiretap.eve_clicks
    eve = eve if eve.is_sorted() else eve.sorted()
    frames = wiretap.decoded()

    # Tiempos anunciados por Bob
    timing_start: dict[int, int] = {}
    chunks_t, chunks_b = [], []
    count = 0
    for frame in frames:
        if frame.type is FrameType.TIMING:
            timing = parse_payload(frame)
            timing_start[frame.epoch] = count
            chunks_t.append((frame.epoch << EPOCH_SHIFT) + timing.offsets.astype(np.int64))
            chunks_b.append(timing.bases)
            count += len(timing)
    bob_times = np.concatenate(chunks_t) if chunks_t else np.zeros(0, dtype=np.int64)
    bob_bases = np.concatenate(chunks_b) if chunks_b else np.zeros(0, dtype=np.uint8)
    bob = ClickStream(Party.BOB, bob_times, np.zeros(bob_times.size, dtype=np.int8))

    eve_of_bob = np.full(bob_times.size, -1, dtype=np.int64)
    offset: Optional[int] = None
    if len(eve) and len(bob):
        try:
            offset = synchronize(
                eve,
                bob,
                window.sync_search_range_ticks,
                window.sync_coarse_bin_ticks,
                window.sync_fine_bin_ticks,
            )
        except SynchronizationError as e:
            logger.error(f"Eve no puede sincronizarse con Bob: {e}", exc_info=True)
            raise ExtractionAbort(f"Sin correlación entre los clics de Eve y los de Bob: {e}") from e
        flat = window.model_copy(update={"offsets_ticks": [0] * 16})
        pairs = match_coincidences(eve, bob, flat, offset)
        if pairs.size:
            same_basis = PORT_BASIS[eve.detectors[pairs[:, 0]]] == bob_bases[pairs[:, 1]]
            pairs = pairs[same_basis]
            eve_of_bob[pairs[:, 1]] = pairs[:, 0]
        logger.info(f"Eve sincronizada con Bob: offset={offset} ticks, pares={len(pairs)}")

    # Clave tamizada de Eve a partir de los SIFT_ACK
    sifted = SiftedKey(Party.EVE)
    confirmations = unmapped = 0
    for frame in frames:
        if frame.type is not FrameType.SIFT_ACK:
            continue
        ack = parse_payload(frame)
        base = timing_start.get(frame.epoch)
        if base is None:
            raise ProtocolError(f"SIFT_ACK de la época {frame.epoch} sin TIMING previo")
        origin = eve_of_bob[base + ack.indices.astype(np.int64)]
        mapped = origin >= 0
        safe = np.where(mapped, origin, 0)
        bits = np.where(mapped, PORT_BIT[eve.detectors[safe]] if len(eve) else 0, 0)
        times = np.where(mapped, eve.timestamps[safe] if len(eve) else 0, 0)
        sifted.append(frame.epoch, bits.astype(np.uint8), origin, times)
        confirmations += int(origin.size)
        unmapped += int(np.count_nonzero(~mapped))

    if confirmations and unmapped > MAX_UNMAPPED_FRACTION * confirmations:
        logger.error(f"Extracción abortada: {unmapped} de {confirmations} confirmaciones sin origen")
        raise ExtractionAbort(
            f"{unmapped} de {confirmations} confirmaciones sin clic de Eve "
            f"(límite {MAX_UNMAPPED_FRACTION:.1%})"
        )
    if unmapped:
        logger.warning(f"{unmapped} confirmaciones sin clic de Eve; se rellenan con 0")

    result = ExtractionResult(sifted, {}, offset, confirmations, unmapped)
    for block in _split_blocks(frames):
        start = parse_payload(block[0])
        key = sifted.for_epochs(start.first_epoch, start.num_epochs)
        try:
            replay = replay_block(key, block)
        except ProtocolError as e:
            logger.warning(f"Bloque {start.first_epoch}: la réplica falla ({e})")
            result.failed_blocks.append(start.first_epoch)
            continue
        result.sample_mismatches += replay.sample_mismatches
        if replay.verified:
            result.verified_blocks += 1
        else:
            result.failed_blocks.append(start.first_epoch)
        result.final_blocks[start.first_epoch] = replay.final

    logger.info(
        f"Extracción: {len(sifted)} bits tamizados, {result.final_key().size} bits finales, "
        f"bloques verificados={result.verified_blocks}, fallidos={len(result.failed_blocks)}"
    )
    return result
