"""Pipeline de clave BBM92 entre Alice y Bob sobre el canal clásico.

Secuencia por época: Bob anuncia TIMING (offset + base de cada clic), Alice
busca coincidencias en la misma base y responde SIFT_ACK. Cada bloque de
``block_epochs`` épocas se procesa completo: muestra de QBER, Cascade,
hash de verificación y amplificación de privacidad. Ningún frame lleva
valores de bit del tamizado ni identidad de detector más allá de la base.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.config import CoincidenceWindowConfig, DoubleClickPolicy, ProtocolConfig
from app.errors import NoKeyPossible, ProtocolError, ReconciliationFailure
from app.frames import (
    Abort,
    AbortReason,
    BlockStart,
    EcParityKind,
    EcParityPayload,
    EcReplyPayload,
    FrameType,
    PaSeedPayload,
    ProtocolFrame,
    QberResult,
    QberSample,
    SiftAckPayload,
    TimingPayload,
    VerifyHash,
    make_frame,
    parse_payload,
)
from app.photonics import PORT_BASIS, PORT_BIT
from app.reconciliation import (
    CascadeResponder,
    PassAnnouncement,
    block_sizes,
    cascade_correct,
    pa_output_length,
    qber_sample_indices,
    remove_indices,
    toeplitz_hash,
    verification_hash,
)
from app.timebase import EPOCH_SHIFT, ClickRecord, ClickStream, Party
from app.timetag import match_coincidences
from app.transport import ClassicalChannel, Direction

logger = logging.getLogger(__name__)

ASCII_LINE_BITS = 64
SEED_LIMIT = 2**63


# ==================== CLAVES TAMIZADAS ====================


@dataclass
class SiftedKey:
    """Clave tamizada particionada por época, con el origen de cada bit."""

    party: Party
    _chunks: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list, repr=False
    )
    _cache: Optional[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default=None, repr=False
    )

    def append(
        self, epoch: int, bits: np.ndarray, sources: np.ndarray, timestamps: np.ndarray
    ) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        if np.any(bits > 1):
            raise ValueError("Los bits de clave deben ser 0 o 1")
        self._chunks.append(
            (
                epoch,
                bits,
                np.asarray(sources, dtype=np.int64),
                np.asarray(timestamps, dtype=np.int64),
            )
        )
        self._cache = None

    def _materialize(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if self._cache is None:
            if self._chunks:
                bits = np.concatenate([c[1] for c in self._chunks])
                epochs = np.concatenate(
                    [np.full(c[1].size, c[0], dtype=np.int64) for c in self._chunks]
                )
                sources = np.concatenate([c[2] for c in self._chunks])
                times = np.concatenate([c[3] for c in self._chunks])
            else:
                bits = np.zeros(0, dtype=np.uint8)
                epochs = sources = times = np.zeros(0, dtype=np.int64)
            self._cache = (bits, epochs, sources, times)
        return self._cache

    @property
    def bits(self) -> np.ndarray:
        return self._materialize()[0]

    @property
    def epochs(self) -> np.ndarray:
        return self._materialize()[1]

    @property
    def sources(self) -> np.ndarray:
        return self._materialize()[2]

    @property
    def timestamps(self) -> np.ndarray:
        return self._materialize()[3]

    def __len__(self) -> int:
        return sum(c[1].size for c in self._chunks)

    def for_epochs(self, first_epoch: int, num_epochs: int) -> np.ndarray:
        epochs = self.epochs
        mask = (epochs >= first_epoch) & (epochs < first_epoch + num_epochs)
        return self.bits[mask]

    def epoch_bits(self) -> dict[int, np.ndarray]:
        """Bits agrupados por época (incluye épocas vacías anunciadas)."""
        return {epoch: bits for epoch, bits, _, _ in self._chunks}

    def to_ascii(self, path: Path) -> None:
        """Exporta la clave como líneas de '0'/'1' de 64 bits."""
        text = "".join("1" if b else "0" for b in self.bits.tolist())
        lines = [text[i : i + ASCII_LINE_BITS] for i in range(0, len(text), ASCII_LINE_BITS)]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def bits_to_ascii(bits: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits).tolist())


# ==================== DOBLES CLICS ====================


@dataclass
class ResolvedClick:
    timestamp: int
    basis: int
    bit: int
    source: int
    double: bool = False


def handle_double_click(
    group: Sequence[ClickRecord],
    policy: DoubleClickPolicy,
    rng: np.random.Generator,
    source: int = 0,
) -> Optional[ResolvedClick]:
    """
    Resuelve los clics de Bob que caen en una misma ventana de resolución.

    Args:
        group: Clics simultáneos (al menos uno).
        policy: DISCARD descarta el grupo; RANDOM asigna un bit aleatorio en la
            base de un clic elegido al azar.
        rng: Generador para la política RANDOM.
        source: Índice del primer clic del grupo en el flujo de Bob.

    Returns:
        El clic resultante, o None si se descarta.
    """
    if not group:
        raise ValueError("Un grupo de clics no puede estar vacío")
    first = group[0]
    if len(group) == 1:
        return ResolvedClick(
            first.timestamp, int(PORT_BASIS[first.detector]), int(PORT_BIT[first.detector]), source
        )
    if policy is DoubleClickPolicy.DISCARD:
        return None
    chosen = group[int(rng.integers(0, len(group)))]
    return ResolvedClick(
        first.timestamp,
        int(PORT_BASIS[chosen.detector]),
        int(rng.integers(0, 2)),
        source,
        double=True,
    )


@dataclass
class ResolvedClicks:
    """Clics de Bob listos para anunciar, tras resolver los dobles."""

    timestamps: np.ndarray
    bases: np.ndarray
    bits: np.ndarray
    sources: np.ndarray
    double_clicks: int = 0

    def __len__(self) -> int:
        return int(self.timestamps.size)


def resolve_double_clicks(
    stream: ClickStream,
    window_ticks: int,
    policy: DoubleClickPolicy,
    rng: np.random.Generator,
) -> ResolvedClicks:
    """Agrupa clics separados ≤ window_ticks y aplica handle_double_click a cada grupo."""
    stream = stream if stream.is_sorted() else stream.sorted()
    ts = stream.timestamps
    n = ts.size
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return ResolvedClicks(empty, empty.astype(np.uint8), empty.astype(np.uint8), empty)

    starts_group = np.ones(n, dtype=bool)
    starts_group[1:] = np.diff(ts) > window_ticks
    group_start = np.flatnonzero(starts_group)
    group_len = np.diff(np.append(group_start, n))

    keep = np.ones(group_start.size, dtype=bool)
    bases = PORT_BASIS[stream.detectors[group_start]].astype(np.uint8)
    bits = PORT_BIT[stream.detectors[group_start]].astype(np.uint8)

    doubles = np.flatnonzero(group_len > 1)
    for g in doubles.tolist():
        begin = int(group_start[g])
        group = [
            ClickRecord(int(ts[k]), int(stream.detectors[k]), stream.party)
            for k in range(begin, begin + int(group_len[g]))
        ]
        resolved = handle_double_click(group, policy, rng, source=begin)
        if resolved is None:
            keep[g] = False
        else:
            bases[g] = resolved.basis
            bits[g] = resolved.bit

    if doubles.size:
        logger.debug(f"Dobles clics en Bob: {doubles.size} (política {policy.value})")
    return ResolvedClicks(
        timestamps=ts[group_start][keep],
        bases=bases[keep],
        bits=bits[keep],
        sources=group_start[keep].astype(np.int64),
        double_clicks=int(doubles.size),
    )


# ==================== ESTACIONES ====================


class BobStation:
    """Bob: anuncia tiempos y bases, construye su clave y corrige contra Alice."""

    def __init__(
        self,
        channel: ClassicalChannel,
        clicks: ResolvedClicks,
        cfg: ProtocolConfig,
        rng: np.random.Generator,
    ) -> None:
        self.channel = channel
        self.clicks = clicks
        self.cfg = cfg
        self.rng = rng
        self.sifted = SiftedKey(Party.BOB)
        self.final_blocks: dict[int, np.ndarray] = {}
        self._epochs = clicks.timestamps >> EPOCH_SHIFT
        self._pending: dict[int, np.ndarray] = {}

    def announce_epoch(self, epoch: int) -> TimingPayload:
        """Envía el TIMING de una época (vacío si no hubo clics)."""
        lo, hi = np.searchsorted(self._epochs, [epoch, epoch + 1])
        positions = np.arange(lo, hi)
        offsets = self.clicks.timestamps[lo:hi] - (epoch << EPOCH_SHIFT)
        payload = TimingPayload(offsets, self.clicks.bases[lo:hi])
        self._pending[epoch] = positions
        self.channel.send(Direction.BOB_TO_ALICE, make_frame(epoch, payload))
        return payload

    def receive_sift_ack(self, epoch: int) -> SiftAckPayload:
        frame = self.channel.receive(Direction.ALICE_TO_BOB)
        if frame.type is not FrameType.SIFT_ACK or frame.epoch != epoch:
            raise ProtocolError(f"Se esperaba SIFT_ACK de la época {epoch}, llegó {frame.type.name}")
        ack = parse_payload(frame)
        positions = self._pending.pop(epoch)
        if ack.indices.size and int(ack.indices[-1]) >= positions.size:
            raise ProtocolError(f"Índice de SIFT_ACK fuera del TIMING de la época {epoch}")
        chosen = positions[ack.indices.astype(np.int64)]
        self.sifted.append(
            epoch, self.clicks.bits[chosen], self.clicks.sources[chosen], self.clicks.timestamps[chosen]
        )
        return ack


class AliceStation:
    """Alice: empareja los anuncios de Bob con sus clics y guarda la clave de referencia."""

    def __init__(
        self,
        channel: ClassicalChannel,
        clicks: ClickStream,
        window: CoincidenceWindowConfig,
        sync_offset: int,
        cfg: ProtocolConfig,
        rng: np.random.Generator,
    ) -> None:
        self.channel = channel
        self.clicks = clicks if clicks.is_sorted() else clicks.sorted()
        # Bob solo anuncia la base, así que no hay calibración por combinación
        self.window = window.model_copy(update={"offsets_ticks": [0] * 16})
        self.sync_offset = sync_offset
        self.cfg = cfg
        self.rng = rng
        self.sifted = SiftedKey(Party.ALICE)
        self.final_blocks: dict[int, np.ndarray] = {}
        self._epochs = (self.clicks.timestamps + sync_offset) >> EPOCH_SHIFT

    def handle_timing(self) -> SiftAckPayload:
        frame = self.channel.receive(Direction.BOB_TO_ALICE)
        if frame.type is not FrameType.TIMING:
            raise ProtocolError(f"Se esperaba TIMING, llegó {frame.type.name}")
        timing = parse_payload(frame)
        epoch = frame.epoch

        bob = ClickStream(
            Party.BOB,
            timestamps=(epoch << EPOCH_SHIFT) + timing.offsets.astype(np.int64),
            detectors=np.zeros(len(timing), dtype=np.int8),
        )
        lo, hi = np.searchsorted(self._epochs, [epoch, epoch + 1])
        mine = ClickStream(Party.ALICE, self.clicks.timestamps[lo:hi], self.clicks.detectors[lo:hi])

        pairs = match_coincidences(mine, bob, self.window, self.sync_offset)
        if pairs.size:
            ia, ib = pairs[:, 0], pairs[:, 1]
            same = PORT_BASIS[mine.detectors[ia]] == timing.bases[ib]
            ia, ib = ia[same], ib[same]
        else:
            ia = ib = np.zeros(0, dtype=np.int64)

        # Anticorrelación del singlete: Alice invierte su bit
        bits = 1 - PORT_BIT[mine.detectors[ia]].astype(np.uint8)
        self.sifted.append(epoch, bits, ia + lo, mine.timestamps[ia])
        ack = SiftAckPayload(ib)
        self.channel.send(Direction.ALICE_TO_BOB, make_frame(epoch, ack))
        return ack


# ==================== SIFT ====================


@dataclass
class SiftResult:
    timing_frames: list[ProtocolFrame]
    sift_ack_frames: list[ProtocolFrame]
    alice_sifted: SiftedKey
    bob_sifted: SiftedKey


def sift(
    bob_clicks: ClickStream,
    alice_clicks: ClickStream,
    sync_offset: int,
    window_cfg: CoincidenceWindowConfig,
    *,
    cfg: Optional[ProtocolConfig] = None,
    rng: Optional[np.random.Generator] = None,
    channel: Optional[ClassicalChannel] = None,
) -> SiftResult:
    """
    Tamizado completo de dos flujos ya sincronizados, época por época.

    Returns:
        Frames TIMING y SIFT_ACK emitidos y las claves tamizadas de ambos.
    """
    cfg = cfg or ProtocolConfig()
    rng = rng or np.random.default_rng(0)
    channel = channel or ClassicalChannel()
    captured: list[ProtocolFrame] = []
    channel.attach_tap(lambda c: captured.append(c.frame))

    resolved = resolve_double_clicks(
        bob_clicks, window_cfg.double_click_window_ticks, cfg.double_click_policy, rng
    )
    bob = BobStation(channel, resolved, cfg, rng)
    alice = AliceStation(channel, alice_clicks, window_cfg, sync_offset, cfg, rng)

    for epoch in range(session_epochs(resolved.timestamps, alice_clicks.timestamps + sync_offset)):
        bob.announce_epoch(epoch)
        alice.handle_timing()
        bob.receive_sift_ack(epoch)

    return SiftResult(
        timing_frames=[f for f in captured if f.type is FrameType.TIMING],
        sift_ack_frames=[f for f in captured if f.type is FrameType.SIFT_ACK],
        alice_sifted=alice.sifted,
        bob_sifted=bob.sifted,
    )


def session_epochs(*timestamp_arrays: np.ndarray) -> int:
    """Número de épocas que cubren todos los timestamps (0 si no hay ninguno)."""
    last = -1
    for ts in timestamp_arrays:
        if ts.size:
            last = max(last, int(ts.max()) >> EPOCH_SHIFT)
    return last + 1


# ==================== PROCESAMIENTO POR BLOQUES ====================


@dataclass
class BlockOutcome:
    first_epoch: int
    num_epochs: int
    sifted_length: int
    sampled: int
    sample_errors: int
    q_est: float
    corrections: int
    leaked_bits: int
    final_length: int
    discarded: bool = False

    @property
    def reconciled_length(self) -> int:
        return self.sifted_length - self.sampled

    @property
    def q_ec(self) -> float:
        """QBER medido por la corrección de errores."""
        return self.corrections / self.reconciled_length if self.reconciled_length else 0.0


class ChannelParityOracle:
    """Oráculo de Cascade para Bob: cada paridad viaja por el canal clásico."""

    def __init__(self, channel: ClassicalChannel, responder: CascadeResponder, epoch: int) -> None:
        self.channel = channel
        self.responder = responder
        self.epoch = epoch

    def _to_bob(self, payload: EcParityPayload) -> EcParityPayload:
        self.channel.send(Direction.ALICE_TO_BOB, make_frame(self.epoch, payload))
        return _expect(self.channel.receive(Direction.ALICE_TO_BOB), FrameType.EC_PARITY)

    def _to_alice(self, payload: EcReplyPayload) -> EcReplyPayload:
        self.channel.send(Direction.BOB_TO_ALICE, make_frame(self.epoch, payload))
        return _expect(self.channel.receive(Direction.BOB_TO_ALICE), FrameType.EC_REPLY)

    def open_pass(self, pass_index: int) -> PassAnnouncement:
        ann = self.responder.announce(pass_index)
        received = self._to_bob(
            EcParityPayload(EcParityKind.BLOCKS, pass_index, ann.seed, ann.block_size, ann.parities)
        )
        return PassAnnouncement(received.seed, received.block_size, received.parities)

    def query(self, queries: list[tuple[int, int, int]]) -> np.ndarray:
        request = self._to_alice(EcReplyPayload(queries))
        answers = self.responder.answer(request.queries)
        received = self._to_bob(
            EcParityPayload(EcParityKind.ANSWERS, 0, self.responder.seed, answers.size, answers)
        )
        return received.parities

    def finish_pass(self, pass_index: int) -> None:
        request = self._to_alice(EcReplyPayload([]))
        if request.queries:
            raise ProtocolError("El cierre de pasada no debe llevar consultas")


def _expect(frame: ProtocolFrame, frame_type: FrameType):
    if frame.type is not frame_type:
        raise ProtocolError(f"Se esperaba {frame_type.name}, llegó {frame.type.name}")
    return parse_payload(frame)


def process_block(
    alice: AliceStation,
    bob: BobStation,
    first_epoch: int,
    num_epochs: int,
) -> BlockOutcome:
    """
    Estimación de QBER, Cascade, verificación y amplificación de un bloque.

    Raises:
        ReconciliationFailure: Si el hash de verificación no coincide.
    """
    channel = alice.channel
    cfg = alice.cfg
    epoch = first_epoch + num_epochs - 1

    channel.send(Direction.BOB_TO_ALICE, make_frame(epoch, BlockStart(first_epoch, num_epochs)))
    _expect(channel.receive(Direction.BOB_TO_ALICE), FrameType.SESSION_CTL)

    alice_key = alice.sifted.for_epochs(first_epoch, num_epochs)
    bob_key = bob.sifted.for_epochs(first_epoch, num_epochs)
    if alice_key.size != bob_key.size:
        raise ProtocolError(
            f"Bloque {first_epoch}: Alice tiene {alice_key.size} bits y Bob {bob_key.size}"
        )
    n = bob_key.size

    # Muestra pública de QBER elegida por Bob
    q_seed = int(bob.rng.integers(0, SEED_LIMIT))
    indices = qber_sample_indices(n, cfg.qber_sample_fraction, q_seed)
    channel.send(Direction.BOB_TO_ALICE, make_frame(epoch, QberSample(q_seed, bob_key[indices])))
    sample = _expect(channel.receive(Direction.BOB_TO_ALICE), FrameType.SESSION_CTL)
    alice_indices = qber_sample_indices(n, cfg.qber_sample_fraction, sample.seed)
    errors = int(np.count_nonzero(alice_key[alice_indices] != sample.bits))
    channel.send(Direction.ALICE_TO_BOB, make_frame(epoch, QberResult(errors, alice_indices.size)))
    result = _expect(channel.receive(Direction.ALICE_TO_BOB), FrameType.SESSION_CTL)
    q_est = result.errors / result.sampled if result.sampled else 0.0

    alice_rest = remove_indices(alice_key, alice_indices)
    bob_rest = remove_indices(bob_key, indices)

    if q_est > cfg.max_qber:
        return _discard_block(alice, bob, first_epoch, num_epochs, n, indices.size, result, alice_rest.size)

    # Cascade
    ec_seed = int(alice.rng.integers(0, SEED_LIMIT))
    sizes = block_sizes(q_est, cfg.ec, alice_rest.size)
    responder = CascadeResponder(alice_rest, ec_seed, sizes)
    cascade = cascade_correct(bob_rest, ChannelParityOracle(channel, responder, epoch), cfg.ec.passes)

    channel.send(
        Direction.ALICE_TO_BOB, make_frame(epoch, VerifyHash(verification_hash(alice_rest, ec_seed)))
    )
    announced = _expect(channel.receive(Direction.ALICE_TO_BOB), FrameType.SESSION_CTL)
    if announced.digest != verification_hash(cascade.corrected, ec_seed):
        channel.send(
            Direction.BOB_TO_ALICE, make_frame(epoch, Abort(AbortReason.HASH_MISMATCH, first_epoch))
        )
        _expect(channel.receive(Direction.BOB_TO_ALICE), FrameType.SESSION_CTL)
        logger.error(f"Bloque {first_epoch}: hash de verificación distinto, sesión abortada")
        raise ReconciliationFailure(
            f"El hash de verificación del bloque {first_epoch} no coincide tras Cascade"
        )

    # Amplificación de privacidad
    m = pa_output_length(alice_rest.size, q_est, cascade.leaked_bits, cfg.pa)
    pa_seed = int(alice.rng.integers(0, SEED_LIMIT))
    channel.send(
        Direction.ALICE_TO_BOB, make_frame(epoch, PaSeedPayload(pa_seed, alice_rest.size, max(m, 0)))
    )
    pa = _expect(channel.receive(Direction.ALICE_TO_BOB), FrameType.PA_SEED)
    try:
        if pa.output_length <= 0:
            raise NoKeyPossible(f"Bloque {first_epoch}: sin clave posible (n={n}, q={q_est:.4f})")
        alice.final_blocks[first_epoch] = toeplitz_hash(alice_rest, pa.output_length, pa.seed)
        bob.final_blocks[first_epoch] = toeplitz_hash(cascade.corrected, pa.output_length, pa.seed)
    except NoKeyPossible as e:
        logger.warning(str(e))
        alice.final_blocks[first_epoch] = np.zeros(0, dtype=np.uint8)
        bob.final_blocks[first_epoch] = np.zeros(0, dtype=np.uint8)

    outcome = BlockOutcome(
        first_epoch=first_epoch,
        num_epochs=num_epochs,
        sifted_length=n,
        sampled=int(indices.size),
        sample_errors=result.errors,
        q_est=q_est,
        corrections=cascade.corrections,
        leaked_bits=cascade.leaked_bits,
        final_length=int(bob.final_blocks[first_epoch].size),
    )
    logger.info(
        f"Bloque {first_epoch}+{num_epochs}: n={n}, q_est={q_est:.4f}, "
        f"corregidos={cascade.corrections}, revelados={cascade.leaked_bits}, final={outcome.final_length}"
    )
    return outcome


def _discard_block(
    alice: AliceStation,
    bob: BobStation,
    first_epoch: int,
    num_epochs: int,
    n: int,
    sampled: int,
    result: QberResult,
    rest_length: int,
) -> BlockOutcome:
    """Cierra un bloque con QBER excesivo: sin Cascade y PA_SEED de longitud 0."""
    channel = alice.channel
    epoch = first_epoch + num_epochs - 1
    q_est = result.errors / result.sampled if result.sampled else 0.0
    channel.send(Direction.ALICE_TO_BOB, make_frame(epoch, PaSeedPayload(0, rest_length, 0)))
    _expect(channel.receive(Direction.ALICE_TO_BOB), FrameType.PA_SEED)
    alice.final_blocks[first_epoch] = np.zeros(0, dtype=np.uint8)
    bob.final_blocks[first_epoch] = np.zeros(0, dtype=np.uint8)
    logger.warning(
        f"Bloque {first_epoch}: QBER de muestra {q_est:.4f} supera {alice.cfg.max_qber}, "
        f"se descartan {n} bits"
    )
    return BlockOutcome(
        first_epoch=first_epoch,
        num_epochs=num_epochs,
        sifted_length=n,
        sampled=int(sampled),
        sample_errors=result.errors,
        q_est=q_est,
        corrections=0,
        leaked_bits=0,
        final_length=0,
        discarded=True,
    )
