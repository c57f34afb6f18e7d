"""Orquestación de una sesión completa.

Capa física en un bucle de eventos por trozos de una época, luego el
protocolo clásico entre Alice y Bob, la extracción pasiva de Eve y la
persistencia de todos los artefactos en ``cfg.output_dir``.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from app.config import SessionConfig
from app.detector import (
    ApdState,
    ThresholdProfile,
    build_detectors,
    dark_counts,
    geiger_detect,
    register_dark_count,
)
from app.engine import Event, EventKind, EventLoop
from app.errors import ExtractionAbort, ReconciliationFailure, SynchronizationError
from app.eve import (
    CalibrationReport,
    ExtractionResult,
    FakedStateGenerator,
    FidelityMatrix,
    Interceptor,
    Photon,
    WiretapLog,
    apply_faked_state,
    calibrate,
    extract_key,
    run_blinding,
)
from app.photonics import (
    PORT_POLARIZATION,
    PORT_TRANSITIONS,
    Port,
    apply_channel_batch,
    channel_delay_ticks,
    generate_pairs,
    measure_alice,
    sample_port,
    sample_ports,
    survival_probability,
)
from app.protocol import (
    AliceStation,
    BlockOutcome,
    BobStation,
    SiftedKey,
    process_block,
    resolve_double_clicks,
    session_epochs,
)
from app.report import (
    ALICE_RAW_DIR,
    ALICE_RECEIVE_DIR,
    BOB_RAW_DIR,
    BOB_RECEIVE_DIR,
    CONFIG_FILE,
    EVE_RAW_DIR,
    FINAL_KEYS_DIR,
    HISTOGRAM_FILE,
    SIFTED_DIR,
    CalibrationSummary,
    CountermeasureSummary,
    EveSummary,
    FidelitySummary,
    QberPoint,
    SessionReport,
    key_discrepancies,
    keys_equal,
    report_rates,
    write_report,
)
from app.storage import StoredKey, write_clicks, write_frames, write_key
from app.timebase import (
    EPOCH_TICKS,
    TICKS_PER_SECOND,
    ClickRecord,
    ClickStream,
    Party,
    fwhm_ps_to_sigma_ticks,
    ns_to_ticks,
    seconds_to_ticks,
)
from app.timetag import CoincidenceHistogram, build_histogram, match_coincidences, synchronize
from app.transport import CapturedFrame, ClassicalChannel, Direction

logger = logging.getLogger(__name__)

# Un generador independiente por fuente de aleatoriedad, derivado de rng_seed
RNG_STREAMS = (
    "source",
    "alice",
    "channel",
    "eve",
    "bob",
    "detect",
    "dark",
    "jitter",
    "calibration",
    "countermeasure",
    "protocol_alice",
    "protocol_bob",
)

PARTY_DIRS = {Party.ALICE: "alice", Party.BOB: "bob", Party.EVE: "eve"}


@dataclass
class SessionOutcome:
    """Todo lo que produce una sesión, además del informe."""

    report: SessionReport
    streams: dict[Party, ClickStream]
    alice_sifted: SiftedKey
    bob_sifted: SiftedKey
    alice_final: dict[int, np.ndarray] = field(default_factory=dict)
    bob_final: dict[int, np.ndarray] = field(default_factory=dict)
    blocks: list[BlockOutcome] = field(default_factory=list)
    captured: list[CapturedFrame] = field(default_factory=list)
    wiretap: Optional[WiretapLog] = None
    extraction: Optional[ExtractionResult] = None
    histogram: Optional[CoincidenceHistogram] = None


def _concat(blocks: dict[int, np.ndarray]) -> np.ndarray:
    parts = [blocks[k] for k in sorted(blocks)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)


def _fidelity_summary(fidelity: FidelityMatrix) -> FidelitySummary:
    return FidelitySummary(**fidelity.to_dict())


def _calibration_summary(report: CalibrationReport) -> CalibrationSummary:
    return CalibrationSummary(
        fidelity=_fidelity_summary(report.fidelity),
        trims_ticks=[int(v) for v in report.trims_ticks],
        mean_latency_ticks=[None if np.isnan(v) else float(v) for v in report.mean_latency_ticks],
        spread_ticks=int(report.spread_ticks),
    )


class QkdSession:
    """Una sesión simulada: estado físico de los tres participantes y su bucle de eventos."""

    def __init__(self, cfg: SessionConfig) -> None:
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.rng_seed).spawn(len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seeds)}

        profile = ThresholdProfile.load(cfg.detector.resolved_profile_path())
        self.detectors: dict[Party, list[ApdState]] = {
            Party.ALICE: build_detectors(cfg.detector, Party.ALICE, profile),
            Party.BOB: build_detectors(cfg.detector, Party.BOB, profile),
        }
        self.interceptor: Optional[Interceptor] = None
        self.generator: Optional[FakedStateGenerator] = None
        self.calibration: Optional[CalibrationReport] = None
        self.fidelity = FidelityMatrix()
        if cfg.scenario.has_eve:
            self.detectors[Party.EVE] = build_detectors(cfg.detector, Party.EVE, profile)
            self.interceptor = Interceptor(self.detectors[Party.EVE], cfg.eve.fsg.min_spacing_ns)

        self.loop = EventLoop()
        self.loop.register(EventKind.PHOTON, self._on_photon)
        self.loop.register(EventKind.FAKED_STATE, self._on_faked_state)
        self.loop.register(EventKind.DARK, self._on_dark)
        self.loop.register(EventKind.TEST_PHOTON, self._on_test_photon)

        self._times: dict[Party, list[int]] = {p: [] for p in self.detectors}
        self._dets: dict[Party, list[int]] = {p: [] for p in self.detectors}
        self._ts_sigma = fwhm_ps_to_sigma_ticks(cfg.timestamp_jitter_fwhm_ps)
        self._next_pair_id = 0
        self.pairs = 0
        self.resent = 0
        self.test_sent = 0
        self.test_detected = 0

    # ==================== PREPARACIÓN DE EVE ====================

    def _prepare_eve(self) -> None:
        """Cegado de Bob y calibración del FSG sobre una copia de sus detectores."""
        cfg = self.cfg
        if not cfg.scenario.blinds_bob:
            return
        fsg = cfg.eve.fsg
        run_blinding(self.detectors[Party.BOB], fsg, strict=True)
        downstream = channel_delay_ticks(cfg.channel, 1.0 - cfg.eve.position_fraction)
        self.generator = FakedStateGenerator(
            fsg, [d.profile for d in self.detectors[Party.BOB]], downstream_delay_ticks=downstream
        )
        if cfg.eve.calibration_pulses > 0:
            self.calibration = calibrate(
                self.generator,
                copy.deepcopy(self.detectors[Party.BOB]),
                self.rngs["calibration"],
                pulses_per_port=cfg.eve.calibration_pulses,
            )
            # La sesión cuenta sus propios estados falsos
            self.generator.sent = 0

    # ==================== INYECCIÓN ====================

    def _inject(self, start: int, end: int) -> None:
        cfg = self.cfg
        batch = generate_pairs(
            cfg.source.pair_rate_hz,
            (end - start) / TICKS_PER_SECOND,
            cfg.source.q_intrinsic,
            self.rngs["source"],
            start_tick=start,
            first_id=self._next_pair_id,
        )
        self._next_pair_id += len(batch)
        self.pairs += len(batch)
        if len(batch):
            alice_ports, partner_ports = measure_alice(batch, self.rngs["alice"])
            self._schedule_alice(batch.emission_times, batch.correlation_ids, alice_ports)
            self._schedule_partner(batch.emission_times, batch.correlation_ids, partner_ports)
        self._schedule_dark(start, end)
        self._schedule_test_photons(start, end)

    def _schedule_alice(self, times: np.ndarray, ids: np.ndarray, ports: np.ndarray) -> None:
        rng = self.rngs["alice"]
        n = times.size
        coupled = rng.random(n) < survival_probability(self.cfg.alice_coupling_loss_db)
        u = rng.random(n)
        keep = coupled & (u < self.cfg.detector.efficiency)
        for t, port, cid, draw in zip(
            times[keep].tolist(), ports[keep].tolist(), ids[keep].tolist(), u[keep].tolist()
        ):
            self.loop.schedule(t, Party.ALICE, port, EventKind.PHOTON, (draw, port), sequence=cid)

    def _schedule_partner(self, times: np.ndarray, ids: np.ndarray, states: np.ndarray) -> None:
        """Fotón compañero: hasta Bob, o hasta Eve si está en la línea."""
        cfg = self.cfg
        if cfg.scenario.has_eve:
            party, rng = Party.EVE, self.rngs["eve"]
            alive, arrival = apply_channel_batch(
                times,
                cfg.channel,
                self.rngs["channel"],
                fraction=cfg.eve.position_fraction,
                extra_loss_db=cfg.eve.insertion_loss_db,
            )
        else:
            party, rng = Party.BOB, self.rngs["bob"]
            alive, arrival = apply_channel_batch(times, cfg.channel, self.rngs["channel"])
        states = states[alive]
        ports = sample_ports(PORT_TRANSITIONS[states], rng)
        u = rng.random(ports.size)
        keep = u < cfg.detector.efficiency
        for t, port, cid, draw, state in zip(
            arrival[keep].tolist(),
            ports[keep].tolist(),
            ids[alive][keep].tolist(),
            u[keep].tolist(),
            states[keep].tolist(),
        ):
            self.loop.schedule(t, party, port, EventKind.PHOTON, (draw, state), sequence=cid)

    def _schedule_dark(self, start: int, end: int) -> None:
        rng = self.rngs["dark"]
        for party, detectors in self.detectors.items():
            for det in detectors:
                for record in dark_counts(det, (start, end), rng):
                    self.loop.schedule(record.timestamp, party, record.detector, EventKind.DARK)

    def _schedule_test_photons(self, start: int, end: int) -> None:
        rate = self.cfg.countermeasure.test_photon_rate_hz
        if rate <= 0:
            return
        rng = self.rngs["countermeasure"]
        count = int(rng.poisson(rate * (end - start) / TICKS_PER_SECOND))
        times = np.sort(rng.integers(start, end, count))
        ports = rng.integers(0, 4, count)
        u = rng.random(count)
        for t, port, draw in zip(times.tolist(), ports.tolist(), u.tolist()):
            self.loop.schedule(t, Party.BOB, port, EventKind.TEST_PHOTON, draw)
        self.test_sent += count

    # ==================== MANEJADORES ====================

    def _record(self, click: ClickRecord) -> None:
        """Guarda el clic con el jitter de la unidad de time-tagging del participante."""
        t = click.timestamp
        if self._ts_sigma > 0:
            t = max(0, t + int(round(self.rngs["jitter"].normal(0.0, self._ts_sigma))))
        party = Party(click.party)
        self._times[party].append(t)
        self._dets[party].append(click.detector)

    def _on_photon(self, event: Event) -> None:
        draw, state = event.payload
        if event.party == Party.EVE:
            photon = Photon(event.time, PORT_POLARIZATION[Port(state)])
            hit = self.interceptor.intercept(photon, self.rngs["eve"], port=event.detector, u=draw)
            if hit is not None:
                self._on_eve_click(*hit)
            return
        detector = self.detectors[Party(event.party)][event.detector]
        click = geiger_detect(detector, event.time, self.rngs["detect"], u=draw)
        if click is not None:
            self._record(click)

    def _on_eve_click(self, port: Port, click: ClickRecord) -> None:
        self._record(click)
        if self.generator is not None:
            fake = self.generator.synthesize_faked_state(port, click.timestamp)
            self.loop.schedule(fake.arrival_time, Party.BOB, int(port), EventKind.FAKED_STATE, fake)
        else:
            self._resend(port, click.timestamp)

    def _resend(self, port: Port, t: int) -> None:
        """Intercepción-reenvío: un fotón único en el estado medido por Eve."""
        cfg = self.cfg
        rest = 1.0 - cfg.eve.position_fraction
        if self.rngs["channel"].random() >= survival_probability(cfg.channel.loss_db * rest):
            return
        arrival = t + ns_to_ticks(cfg.eve.fsg.insertion_delay_ns) + channel_delay_ticks(cfg.channel, rest)
        rng = self.rngs["bob"]
        bob_port = sample_port(PORT_POLARIZATION[port], rng).index
        draw = float(rng.random())
        self.resent += 1
        if draw < cfg.detector.efficiency:
            self.loop.schedule(arrival, Party.BOB, bob_port, EventKind.PHOTON, (draw, int(port)))

    def _on_faked_state(self, event: Event) -> None:
        fake = event.payload
        clicks = apply_faked_state(fake, self.detectors[Party.BOB], self.rngs["bob"])
        self.fidelity.record(fake.target, [c.detector for c in clicks])
        for click in clicks:
            self._record(click)

    def _on_dark(self, event: Event) -> None:
        party = Party(event.party)
        click = register_dark_count(self.detectors[party][event.detector], event.time)
        if click is None:
            return
        if party is Party.EVE:
            if self.interceptor.admit_dark_count(click):
                self._on_eve_click(Port(click.detector), click)
            return
        self._record(click)

    def _on_test_photon(self, event: Event) -> None:
        detector = self.detectors[Party.BOB][event.detector]
        if geiger_detect(detector, event.time, self.rngs["countermeasure"], u=event.payload):
            self.test_detected += 1

    # ==================== EJECUCIÓN ====================

    def simulate(self) -> dict[Party, ClickStream]:
        """Capa física completa; devuelve los flujos de clics ordenados."""
        self._prepare_eve()
        end_tick = seconds_to_ticks(self.cfg.duration_s)
        start = 0
        while start < end_tick:
            end = min(start + EPOCH_TICKS, end_tick)
            self._inject(start, end)
            self.loop.run(until=end)
            start = end
        self.loop.run()

        streams = {
            party: ClickStream(
                party,
                np.asarray(self._times[party], dtype=np.int64),
                np.asarray(self._dets[party], dtype=np.int8),
            ).sorted()
            for party in self.detectors
        }
        logger.info(
            f"Capa física: {self.pairs} pares, clics "
            + ", ".join(f"{p.name}={len(s)}" for p, s in streams.items())
            + f", eventos={self.loop.processed}"
        )
        return streams

    def run(self, *, persist: bool = True) -> SessionOutcome:
        """
        Ejecuta la sesión completa.

        Raises:
            ConfigurationError: Si el cegado no alcanza a todos los detectores de Bob.
            CalibrationError: Si la calibración del FSG produce clics fuera de la diagonal.
        """
        cfg = self.cfg
        logger.info(
            f"Sesión {cfg.scenario.value}: seed={cfg.rng_seed}, duración={cfg.duration_s} s"
        )
        streams = self.simulate()
        outcome = self._run_protocol(streams)
        if cfg.scenario.has_eve:
            self._summarize_eve(outcome)
        self._summarize_countermeasure(outcome.report)
        if persist:
            self.persist(outcome)
        report = outcome.report
        logger.info(
            f"Sesión terminada: completada={report.completed}, tamizada={report.sifted_length}, "
            f"final={report.final_length}, QBER={report.qber}"
        )
        return outcome

    def _run_protocol(self, streams: dict[Party, ClickStream]) -> SessionOutcome:
        cfg = self.cfg
        window = cfg.window
        alice, bob = streams[Party.ALICE], streams[Party.BOB]
        report = SessionReport(
            scenario=cfg.scenario,
            rng_seed=cfg.rng_seed,
            duration_s=cfg.duration_s,
            raw_clicks={PARTY_DIRS[p]: len(s) for p, s in streams.items()},
        )
        outcome = SessionOutcome(report, streams, SiftedKey(Party.ALICE), SiftedKey(Party.BOB))

        try:
            offset = synchronize(
                alice,
                bob,
                window.sync_search_range_ticks,
                window.sync_coarse_bin_ticks,
                window.sync_fine_bin_ticks,
            )
        except (SynchronizationError, ValueError) as e:
            logger.error(f"No se pudo sincronizar Alice y Bob: {e}", exc_info=True)
            report.completed = False
            report.abort_reason = f"sincronización: {e}"
            return outcome
        report.sync_offset_ticks = offset

        pairs = match_coincidences(alice, bob, window, offset)
        outcome.histogram = build_histogram(pairs, alice, bob, window, offset)
        report.coincidences = int(len(pairs))
        report.fwhm_ps = outcome.histogram.fwhm_all()
        report.mean_fwhm_ps = outcome.histogram.mean_fwhm_ps()

        channel = ClassicalChannel()
        channel.attach_tap(outcome.captured.append)
        if cfg.scenario.has_eve:
            outcome.wiretap = WiretapLog(eve_clicks=streams[Party.EVE])
            channel.attach_tap(outcome.wiretap.capture)

        protocol = cfg.protocol
        resolved = resolve_double_clicks(
            bob, window.double_click_window_ticks, protocol.double_click_policy,
            self.rngs["protocol_bob"],
        )
        report.double_clicks = resolved.double_clicks
        bob_station = BobStation(channel, resolved, protocol, self.rngs["protocol_bob"])
        alice_station = AliceStation(
            channel, alice, window, offset, protocol, self.rngs["protocol_alice"]
        )
        outcome.alice_sifted, outcome.bob_sifted = alice_station.sifted, bob_station.sifted
        outcome.alice_final, outcome.bob_final = alice_station.final_blocks, bob_station.final_blocks

        n_epochs = session_epochs(resolved.timestamps, alice.timestamps + offset)
        per_block = protocol.block_epochs
        try:
            for epoch in range(n_epochs):
                bob_station.announce_epoch(epoch)
                alice_station.handle_timing()
                bob_station.receive_sift_ack(epoch)
                if (epoch + 1) % per_block == 0 or epoch == n_epochs - 1:
                    first = epoch - epoch % per_block
                    outcome.blocks.append(
                        process_block(alice_station, bob_station, first, epoch - first + 1)
                    )
        except ReconciliationFailure as e:
            logger.error(f"Sesión abortada: {e}", exc_info=True)
            report.completed = False
            report.abort_reason = str(e)

        self._summarize_keys(outcome)
        return outcome

    def _summarize_keys(self, outcome: SessionOutcome) -> None:
        report = outcome.report
        alice_bits, bob_bits = outcome.alice_sifted.bits, outcome.bob_sifted.bits
        report.sifted_length = int(bob_bits.size)
        if bob_bits.size:
            report.qber_sifted = key_discrepancies(alice_bits, bob_bits) / bob_bits.size

        errors = sampled = 0
        num = den = 0
        for block in outcome.blocks:
            errors += block.sample_errors
            sampled += block.sampled
            num += block.sample_errors
            den += block.sampled
            if not block.discarded:
                num += block.corrections
                den += block.reconciled_length
            report.qber_series.append(
                QberPoint(
                    first_epoch=block.first_epoch,
                    num_epochs=block.num_epochs,
                    time_s=(block.first_epoch + block.num_epochs / 2) * EPOCH_TICKS / TICKS_PER_SECOND,
                    sifted_length=block.sifted_length,
                    sampled=block.sampled,
                    q_sample=block.q_est,
                    q_ec=block.q_ec,
                    leaked_bits=block.leaked_bits,
                    final_length=block.final_length,
                )
            )
        report.qber_sample = errors / sampled if sampled else None
        report.qber = num / den if den else None

        alice_final, bob_final = _concat(outcome.alice_final), _concat(outcome.bob_final)
        report.final_length = int(bob_final.size)
        report.final_to_sifted = bob_final.size / bob_bits.size if bob_bits.size else None
        report.verdicts.alice_equals_bob = report.completed and keys_equal(alice_final, bob_final)

        report.rates = report_rates(
            outcome.streams[Party.BOB],
            outcome.bob_sifted.timestamps,
            outcome.bob_sifted.epochs,
            outcome.blocks,
            self.cfg.duration_s,
        )
        report.mean_rates = {
            name: report.rates.mean(name) for name in ("raw", "sifted", "final")
        }

    def _summarize_eve(self, outcome: SessionOutcome) -> None:
        report = outcome.report
        eve = EveSummary(
            clicks=report.raw_clicks.get("eve", 0),
            registered=self.interceptor.registered,
            suppressed=self.interceptor.suppressed,
            faked_states=self.generator.sent if self.generator else 0,
            resent_photons=self.resent,
        )
        if self.generator is not None:
            eve.fidelity = _fidelity_summary(self.fidelity)
        if self.calibration is not None:
            eve.calibration = _calibration_summary(self.calibration)
        report.eve = eve
        if outcome.wiretap is None:
            return

        try:
            extraction = extract_key(outcome.wiretap, window=self.cfg.window)
        except ExtractionAbort as e:
            logger.error(f"Extracción de Eve abortada: {e}", exc_info=True)
            eve.extraction_error = str(e)
            return
        outcome.extraction = extraction
        eve.sync_offset_ticks = extraction.sync_offset
        eve.confirmations = extraction.confirmations
        eve.unmapped = extraction.unmapped
        eve.verified_blocks = extraction.verified_blocks
        eve.failed_blocks = list(extraction.failed_blocks)

        eve_bits, bob_bits = extraction.eve_sifted.bits, outcome.bob_sifted.bits
        eve.sifted_length = int(eve_bits.size)
        eve.sifted_discrepancies = key_discrepancies(eve_bits, bob_bits)
        eve_final = extraction.final_key()
        eve.final_length = int(eve_final.size)
        report.verdicts.eve_equals_bob_sifted = keys_equal(eve_bits, bob_bits)
        report.verdicts.eve_equals_bob_final = keys_equal(eve_final, _concat(outcome.bob_final))

    def _summarize_countermeasure(self, report: SessionReport) -> None:
        cm = self.cfg.countermeasure
        if cm.test_photon_rate_hz <= 0:
            return
        expected = self.test_sent * self.cfg.detector.efficiency
        detected = self.test_detected
        report.countermeasure = CountermeasureSummary(
            sent=self.test_sent,
            detected=detected,
            expected=expected,
            attack_detected=bool(self.test_sent) and detected < cm.alarm_fraction * expected,
        )
        if report.countermeasure.attack_detected:
            logger.warning(
                f"Contramedida: {detected} de {self.test_sent} fotones de prueba detectados "
                f"(esperados {expected:.0f}), detector posiblemente cegado"
            )

    # ==================== PERSISTENCIA ====================

    def persist(self, outcome: SessionOutcome) -> Path:
        """Escribe eventos crudos, transcripciones, claves, histograma e informe."""
        out = Path(self.cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)

        write_clicks(out / ALICE_RAW_DIR, outcome.streams[Party.ALICE])
        write_clicks(out / BOB_RAW_DIR, outcome.streams[Party.BOB])
        if Party.EVE in outcome.streams:
            write_clicks(out / EVE_RAW_DIR, outcome.streams[Party.EVE])

        write_frames(out / ALICE_RECEIVE_DIR, outcome.captured, Direction.BOB_TO_ALICE)
        write_frames(out / BOB_RECEIVE_DIR, outcome.captured, Direction.ALICE_TO_BOB)

        sifted = {Party.ALICE: outcome.alice_sifted, Party.BOB: outcome.bob_sifted}
        finals = {Party.ALICE: outcome.alice_final, Party.BOB: outcome.bob_final}
        if outcome.extraction is not None:
            sifted[Party.EVE] = outcome.extraction.eve_sifted
            finals[Party.EVE] = outcome.extraction.final_blocks
        (out / SIFTED_DIR).mkdir(parents=True, exist_ok=True)
        for party, key in sifted.items():
            name = PARTY_DIRS[party]
            for epoch, bits in key.epoch_bits().items():
                write_key(
                    out / SIFTED_DIR / name / f"{epoch:08x}.key", StoredKey(party, epoch, 1, bits)
                )
            key.to_ascii(out / SIFTED_DIR / f"{name}.txt")
        num_epochs = {b.first_epoch: b.num_epochs for b in outcome.blocks}
        for party, blocks in finals.items():
            name = PARTY_DIRS[party]
            (out / FINAL_KEYS_DIR / name).mkdir(parents=True, exist_ok=True)
            for first, bits in blocks.items():
                write_key(
                    out / FINAL_KEYS_DIR / name / f"{first:08x}.key",
                    StoredKey(party, first, num_epochs.get(first, self.cfg.protocol.block_epochs), bits),
                )

        if outcome.histogram is not None:
            outcome.histogram.to_csv(out / HISTOGRAM_FILE)
        config = self.cfg.model_dump(mode="json", exclude={"output_dir"})
        (out / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
        write_report(outcome.report, out)
        logger.info(f"Sesión persistida en {out}")
        return out


def run_session(cfg: SessionConfig, *, persist: bool = True) -> SessionReport:
    """
    Ejecuta una sesión y devuelve su informe.

    Raises:
        ConfigurationError: Configuración física imposible (cegado insuficiente).
        CalibrationError: Calibración del FSG con clics fuera de la diagonal.
    """
    return QkdSession(cfg).run(persist=persist).report
