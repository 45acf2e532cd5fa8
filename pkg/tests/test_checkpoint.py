import struct

import numpy as np
import pytest

from fusionbooster.booster import AseModule, BoosterConfig, ProbeUnit, param_checksum
from fusionbooster.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from fusionbooster.errors import CheckpointFormatError


@pytest.fixture
def nets():
    rng = np.random.default_rng(7)
    return ProbeUnit(rng), ProbeUnit(rng), AseModule(rng)


@pytest.fixture
def saved(tmp_path, nets):
    path = tmp_path / "model.fbst"
    cfg = BoosterConfig(k=2, epochs=4, lr=3e-4)
    save_checkpoint(path, *nets, cfg, {"loss_per": [0.5, 0.25], "loss_rec": [0.1]})
    return path, cfg


class TestRoundTrip:
    def test_parameters_bit_identical(self, saved, nets):
        path, _ = saved
        ck = load_checkpoint(path)
        for orig, back in zip(nets, ck.models):
            assert param_checksum(orig) == param_checksum(back)

    def test_config_and_traces(self, saved):
        path, cfg = saved
        ck = load_checkpoint(path)
        assert ck.config == cfg
        assert ck.traces == {"loss_per": [0.5, 0.25], "loss_rec": [0.1]}
        assert ck.version == 1

    def test_resave_is_byte_identical(self, saved, tmp_path):
        path, _ = saved
        ck = load_checkpoint(path)
        again = tmp_path / "again.fbst"
        save_checkpoint(again, *ck.models, ck.config, ck.traces)
        assert again.read_bytes() == path.read_bytes()

    def test_size_under_one_megabyte(self, saved):
        assert saved[0].stat().st_size < 1_000_000

    def test_header(self, saved):
        raw = saved[0].read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<II", raw[4:12]) == (1, 24)

    def test_no_temp_files_left(self, saved):
        assert [p.name for p in saved[0].parent.iterdir()] == ["model.fbst"]


class TestCorruption:
    def test_bad_magic(self, saved):
        path, _ = saved
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, saved):
        path, _ = saved
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
        with pytest.raises(CheckpointFormatError, match="version 9"):
            load_checkpoint(path)

    def test_truncated_block_named(self, saved):
        path, _ = saved
        raw = path.read_bytes()
        # first block: 4-byte length + name + 16-byte shape, then data
        name_len = struct.unpack("<I", raw[12:16])[0]
        path.write_bytes(raw[:16 + name_len + 16 + 10])
        with pytest.raises(CheckpointFormatError) as err:
            load_checkpoint(path)
        assert err.value.block == "probe_a.0.weight"
        assert "probe_a.0.weight" in str(err.value)

    def test_flipped_byte_fails_checksum(self, saved):
        path, _ = saved
        raw = bytearray(path.read_bytes())
        raw[200] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="checksum"):
            load_checkpoint(path)

    def test_trailing_garbage(self, saved):
        path, _ = saved
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
