"""Unit tests for binary checkpoints"""

import os
import struct

import numpy as np
import pytest

from src.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, config_digest, load_checkpoint, save_checkpoint
from src.exceptions import DataError


@pytest.fixture
def checkpoint():
    """A checkpoint with model and optimizer sections"""
    arrays = {
        "model/enc.embed": np.arange(6, dtype=np.float64).reshape(2, 3),
        "model/out.bias": np.array([0.5, -0.25]),
        "opt/t": np.array(3.0),
    }
    return Checkpoint(model_id="copy-tf", arrays=arrays, step=12, config_digest="abc",
                      metadata={"dims": {"hidden_dim": 4}})


class TestEncoding:
    """Byte-level format"""

    def test_header_fields(self, checkpoint):
        """Blobs start with the magic bytes and version"""
        blob = checkpoint.to_bytes()
        assert blob[:4] == MAGIC
        assert struct.unpack_from("<I", blob, 4)[0] == FORMAT_VERSION

    def test_decode_restores_everything(self, checkpoint):
        """Arrays, shapes and metadata survive encoding"""
        restored = Checkpoint.from_bytes(checkpoint.to_bytes())
        assert restored.model_id == "copy-tf"
        assert restored.step == 12
        assert restored.metadata == {"dims": {"hidden_dim": 4}}
        assert restored.arrays["opt/t"].shape == ()
        for name, array in checkpoint.arrays.items():
            assert np.array_equal(restored.arrays[name], array)

    def test_encoding_is_deterministic(self, checkpoint):
        """Array order does not depend on insertion order"""
        shuffled = Checkpoint(model_id=checkpoint.model_id, arrays=dict(reversed(list(checkpoint.arrays.items()))),
                              step=checkpoint.step, config_digest=checkpoint.config_digest,
                              metadata=checkpoint.metadata)
        assert shuffled.to_bytes() == checkpoint.to_bytes()

    def test_bad_magic(self, checkpoint):
        """Foreign files are refused"""
        with pytest.raises(DataError):
            Checkpoint.from_bytes(b"XXXX" + checkpoint.to_bytes()[4:])

    def test_bad_version(self, checkpoint):
        """Unknown versions are refused"""
        blob = bytearray(checkpoint.to_bytes())
        blob[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        with pytest.raises(DataError):
            Checkpoint.from_bytes(bytes(blob))

    @pytest.mark.parametrize("cut", [6, 12, 40, -1])
    def test_truncated(self, checkpoint, cut):
        """Truncated blobs raise a data error"""
        with pytest.raises(DataError):
            Checkpoint.from_bytes(checkpoint.to_bytes()[:cut])


class TestFiles:
    """Saving and loading"""

    def test_save_and_load(self, checkpoint, tmp_path):
        """A saved checkpoint loads back and leaves no temp file"""
        path = save_checkpoint(checkpoint, str(tmp_path / "nested" / "model.ckpt"))
        assert not os.path.exists(path + ".tmp")
        assert load_checkpoint(path).to_bytes() == checkpoint.to_bytes()

    def test_missing_file(self, tmp_path):
        """A missing checkpoint is a data error"""
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / "none.ckpt"))

    def test_section(self, checkpoint):
        """Sections strip their prefix"""
        assert set(checkpoint.section("model")) == {"enc.embed", "out.bias"}
        assert set(checkpoint.section("opt")) == {"t"}
        assert checkpoint.section("disc") == {}


class TestDigest:
    """Configuration digests"""

    def test_key_order_irrelevant(self):
        """Digests use canonical JSON"""
        assert config_digest({"a": 1, "b": {"c": 2}}) == config_digest({"b": {"c": 2}, "a": 1})

    def test_value_sensitive(self):
        """Any value change changes the digest"""
        assert config_digest({"a": 1}) != config_digest({"a": 2})
