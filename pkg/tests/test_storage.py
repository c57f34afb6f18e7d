"""Tests de la persistencia por época (app.storage)."""

import numpy as np
import pytest

from app.errors import StorageError
from app.frames import BlockStart, make_frame
from app.storage import (
    StoredKey,
    merge_transcript,
    read_clicks,
    read_frames,
    read_key,
    read_key_directory,
    write_clicks,
    write_frames,
    write_key,
)
from app.timebase import EPOCH_TICKS, ClickStream, Party
from app.transport import ClassicalChannel, Direction


@pytest.fixture
def stream():
    times = np.array([5, 100, EPOCH_TICKS + 7, 3 * EPOCH_TICKS + 1], dtype=np.int64)
    return ClickStream(Party.BOB, times, np.array([0, 3, 2, 1], dtype=np.int8))


class TestClicks:
    """Archivos .clk por época."""

    def test_un_archivo_por_epoca(self, tmp_path, stream):
        paths = write_clicks(tmp_path, stream)
        assert [p.name for p in paths] == ["00000000.clk", "00000001.clk", "00000003.clk"]

    def test_lectura(self, tmp_path, stream):
        write_clicks(tmp_path, stream)
        loaded = read_clicks(tmp_path)
        assert loaded.party is Party.BOB
        np.testing.assert_array_equal(loaded.timestamps, stream.timestamps)
        np.testing.assert_array_equal(loaded.detectors, stream.detectors)

    def test_directorio_vacio(self, tmp_path):
        assert len(read_clicks(tmp_path)) == 0

    def test_crc_corrupto(self, tmp_path, stream):
        path = write_clicks(tmp_path, stream)[0]
        data = bytearray(path.read_bytes())
        data[17] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(StorageError, match="CRC"):
            read_clicks(tmp_path)

    def test_magic_ajeno(self, tmp_path, stream):
        write_clicks(tmp_path, stream)
        key_path = write_key(tmp_path / "x.key", StoredKey(Party.BOB, 0, 1, np.ones(3)))
        key_path.rename(tmp_path / "00000009.clk")
        with pytest.raises(StorageError, match="magic"):
            read_clicks(tmp_path)

    def test_truncado(self, tmp_path):
        (tmp_path / "00000000.clk").write_bytes(b"QKCL")
        with pytest.raises(StorageError, match="truncado"):
            read_clicks(tmp_path)


class TestFrames:
    """Frames recibidos por cada lado."""

    def test_transcripcion_en_orden_de_entrega(self, tmp_path):
        channel = ClassicalChannel()
        captured = []
        channel.attach_tap(captured.append)
        channel.send(Direction.BOB_TO_ALICE, make_frame(0, BlockStart(0, 1)))
        channel.send(Direction.ALICE_TO_BOB, make_frame(0, BlockStart(0, 2)))
        channel.send(Direction.BOB_TO_ALICE, make_frame(1, BlockStart(1, 3)))

        write_frames(tmp_path / "alice", captured, Direction.BOB_TO_ALICE)
        write_frames(tmp_path / "bob", captured, Direction.ALICE_TO_BOB)

        assert len(read_frames(tmp_path / "alice")) == 2
        merged = merge_transcript(tmp_path / "alice", tmp_path / "bob")
        assert [c.sequence for c in merged] == [0, 1, 2]
        assert [c.data for c in merged] == [c.data for c in captured]


class TestKeys:
    """Claves empaquetadas."""

    def test_escritura_y_lectura(self, tmp_path):
        bits = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], dtype=np.uint8)
        write_key(tmp_path / "00000004.key", StoredKey(Party.ALICE, 4, 9, bits))
        key = read_key(tmp_path / "00000004.key")
        assert key.party is Party.ALICE
        assert (key.first_epoch, key.num_epochs) == (4, 9)
        np.testing.assert_array_equal(key.bits, bits)

    def test_clave_vacia(self, tmp_path):
        write_key(tmp_path / "k.key", StoredKey(Party.EVE, 0, 0, np.zeros(0)))
        assert read_key(tmp_path / "k.key").bits.size == 0

    def test_directorio_concatenado_por_epoca(self, tmp_path):
        write_key(tmp_path / "00000009.key", StoredKey(Party.BOB, 9, 1, np.array([0, 0])))
        write_key(tmp_path / "00000000.key", StoredKey(Party.BOB, 0, 1, np.array([1])))
        np.testing.assert_array_equal(read_key_directory(tmp_path), [1, 0, 0])
        assert read_key_directory(tmp_path / "nada").size == 0
