"""Tests de QBER, Cascade y amplificación de privacidad (app.reconciliation)."""

import numpy as np
import pytest

from app.config import BlockSchedule, EcConfig, PaConfig
from app.errors import NoKeyPossible, ProtocolError
from app.reconciliation import (
    CascadeResponder,
    LocalParityOracle,
    binary_entropy,
    block_sizes,
    cascade_correct,
    cascade_permutation,
    estimate_qber,
    initial_block_size,
    pa_output_length,
    privacy_amplify,
    qber_sample_indices,
    toeplitz_hash,
    toeplitz_matrix,
    verification_hash,
)


def _noisy_pair(n, errors, seed):
    rng = np.random.default_rng(seed)
    alice = rng.integers(0, 2, n, dtype=np.uint8)
    bob = alice.copy()
    flips = rng.choice(n, errors, replace=False)
    bob[flips] ^= 1
    return alice, bob


class TestQber:
    """Muestra pública de QBER."""

    def test_entropia_binaria(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(0.5) == pytest.approx(1.0)
        assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-3)

    def test_muestra_y_retirada(self):
        alice, bob = _noisy_pair(1000, 100, 0)
        estimate = estimate_qber(alice, bob, 0.05, rng_seed=42)
        assert estimate.sampled == 50
        assert estimate.alice_key.size == estimate.bob_key.size == 950
        assert 0.0 <= estimate.q_est <= 0.3
        assert estimate.errors == int(np.count_nonzero(alice[estimate.sample_indices] != bob[estimate.sample_indices]))

    def test_muestra_reproducible(self):
        np.testing.assert_array_equal(qber_sample_indices(500, 0.1, 7), qber_sample_indices(500, 0.1, 7))
        assert qber_sample_indices(0, 0.1, 7).size == 0

    def test_longitudes_distintas(self):
        with pytest.raises(ProtocolError, match="Longitudes"):
            estimate_qber(np.zeros(3, dtype=np.uint8), np.zeros(4, dtype=np.uint8), 0.5, 1)


class TestBlockSizes:
    def test_calendario_por_defecto(self):
        """64 bits en la primera pasada y la mitad en cada una de las siguientes."""
        assert block_sizes(0.055, EcConfig(), 10_000) == [64, 32, 16, 8]
        assert block_sizes(0.0, EcConfig(), 10_000) == [64, 32, 16, 8]

    def test_bloque_minimo_y_clave_corta(self):
        cfg = EcConfig(passes=6)
        assert block_sizes(0.05, cfg, 10_000) == [64, 32, 16, 8, 8, 8]
        assert block_sizes(0.05, EcConfig(), 20) == [20, 20, 16, 8]

    def test_calendario_duplicando(self):
        cfg = EcConfig(schedule=BlockSchedule.DOUBLING)
        assert initial_block_size(0.05, cfg, 10_000) == 14
        assert initial_block_size(0.5, cfg, 10_000) == 8
        assert initial_block_size(0.0, cfg, 300) == 300
        assert block_sizes(0.05, cfg, 10_000) == [14, 28, 56, 112]
        assert block_sizes(0.001, cfg, 300) == [300, 300, 300, 300]


class TestCascade:
    """Corrección de errores interactiva."""

    def _run(self, alice, bob, q=0.0, seed=5, cfg=None):
        cfg = cfg or EcConfig()
        oracle = LocalParityOracle(CascadeResponder(alice, seed, block_sizes(q, cfg, alice.size)))
        return cascade_correct(bob, oracle, cfg.passes), oracle

    def test_claves_iguales_solo_primera_pasada(self):
        """Sin errores solo se revelan las paridades de la primera pasada."""
        alice, _ = _noisy_pair(1000, 0, 1)
        result, oracle = self._run(alice, alice.copy())
        assert result.corrections == 0
        assert oracle.queries == []
        assert result.leaked_bits == -(-1000 // 64)

    def test_primera_pasada_par_no_abre_mas(self):
        """Dos errores en el mismo bloque de 64 no cambian ninguna paridad de la primera pasada."""
        alice = np.zeros(128, dtype=np.uint8)
        responder = CascadeResponder(alice, 3, [64, 32, 16, 8])
        perm = cascade_permutation(3, 0, 128)
        bob = alice.copy()
        bob[perm[:2]] ^= 1

        opened = []

        class Recorder(LocalParityOracle):
            def open_pass(self, pass_index):
                opened.append(pass_index)
                return super().open_pass(pass_index)

        result = cascade_correct(bob, Recorder(responder), 4)
        assert opened == [0]
        assert result.corrections == 0
        assert result.leaked_bits == 2

    def test_un_error_siempre_se_corrige(self):
        alice, bob = _noisy_pair(2000, 1, 2)
        result, _ = self._run(alice, bob, 0.005)
        np.testing.assert_array_equal(result.corrected, alice)
        assert result.corrections == 1

    def test_errores_dispersos(self):
        """0.5 % de errores: la clave de Bob queda idéntica a la de Alice."""
        alice, bob = _noisy_pair(2000, 10, 3)
        result, _ = self._run(alice, bob, 0.005)
        np.testing.assert_array_equal(result.corrected, alice)
        assert result.corrections == 10
        assert result.leaked_bits > 0

    def test_qber_de_operacion(self):
        """q = 0.055 sobre 10⁵ bits: claves idénticas y fuga entre 0.4 n y 0.9 n."""
        n = 100_000
        alice, bob = _noisy_pair(n, 5_500, 6)
        result, _ = self._run(alice, bob, 0.055)
        np.testing.assert_array_equal(result.corrected, alice)
        assert result.corrections == 5_500
        assert 0.4 <= result.leaked_bits / n <= 0.9

    def test_calendario_duplicando_corrige(self):
        alice, bob = _noisy_pair(4000, 40, 7)
        result, _ = self._run(alice, bob, 0.01, cfg=EcConfig(schedule=BlockSchedule.DOUBLING))
        np.testing.assert_array_equal(result.corrected, alice)

    def test_clave_vacia(self):
        empty = np.zeros(0, dtype=np.uint8)
        result, _ = self._run(empty, empty, 0.01)
        assert result.corrected.size == 0
        assert result.leaked_bits == 0

    def test_consulta_fuera_de_rango(self):
        responder = CascadeResponder(np.zeros(10, dtype=np.uint8), 1, [4, 4, 4, 4])
        with pytest.raises(ProtocolError, match="fuera de rango"):
            responder.answer([(0, 5, 11)])


class TestVerificationHash:
    def test_ocho_bytes_y_sensibilidad(self):
        bits = np.array([1, 0, 1, 1], dtype=np.uint8)
        digest = verification_hash(bits, 9)
        assert len(digest) == 8
        assert digest == verification_hash(bits.copy(), 9)
        assert digest != verification_hash(bits, 10)
        assert digest != verification_hash(np.array([1, 0, 1, 0], dtype=np.uint8), 9)


class TestPrivacyAmplification:
    """Hash de Toeplitz."""

    def test_fft_igual_a_matriz_densa(self):
        rng = np.random.default_rng(4)
        key = rng.integers(0, 2, 200, dtype=np.uint8)
        expected = (toeplitz_matrix(11, 200, 80).astype(np.int64) @ key) % 2
        np.testing.assert_array_equal(toeplitz_hash(key, 80, 11), expected)

    def test_longitud_de_salida(self):
        assert pa_output_length(10_000, 0.0, 1000, PaConfig()) == 8900
        assert pa_output_length(10_000, 0.11, 0, PaConfig(safety_margin_bits=0)) == int(
            np.floor(10_000 * (1 - binary_entropy(0.11)))
        )

    def test_sin_clave_posible(self):
        with pytest.raises(NoKeyPossible):
            privacy_amplify(np.ones(50, dtype=np.uint8), 10, 0.05, PaConfig(), seed=1)

    def test_claves_iguales_dan_el_mismo_resultado(self):
        key = np.random.default_rng(5).integers(0, 2, 1000, dtype=np.uint8)
        out = privacy_amplify(key, 100, 0.02, PaConfig(), seed=3)
        assert out.size == pa_output_length(1000, 0.02, 100, PaConfig())
        np.testing.assert_array_equal(out, privacy_amplify(key.copy(), 100, 0.02, PaConfig(), seed=3))
