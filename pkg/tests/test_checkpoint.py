import struct

import numpy as np
import pytest

from selfgnn.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_sections,
    encode_sections,
    load_checkpoint,
    save_checkpoint,
)
from selfgnn.model import ModelConfig, init_params


def test_sections_roundtrip_all_dtypes():
    secs = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -2.0]),
        "c": np.array([[7]], dtype=np.int64),
        "d": np.frombuffer(b"hi", dtype=np.uint8),
        "scalar": np.array(3.0),
    }
    out = decode_sections(encode_sections(secs))
    assert list(out) == list(secs)
    for k, v in secs.items():
        assert out[k].dtype == v.dtype and np.array_equal(out[k], v)


def test_header_layout():
    blob = encode_sections({"w": np.ones((2, 3), dtype=np.float32)})
    assert blob[:8] == MAGIC and struct.unpack_from("<I", blob, 8) == (1,)
    assert struct.unpack_from("<I", blob, 12) == (1,) and blob[16:17] == b"w"
    tag, rank = struct.unpack_from("<BI", blob, 17)
    assert (tag, rank) == (1, 2)
    assert struct.unpack_from("<2Q", blob, 22) == (2, 3)
    assert len(blob) == 38 + 24


def test_corrupt_files_rejected():
    blob = encode_sections({"w": np.ones(4)})
    with pytest.raises(CheckpointError):
        decode_sections(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_sections(blob[:-3])
    with pytest.raises(CheckpointError):
        decode_sections(blob[:8] + struct.pack("<I", 9) + blob[12:])
    with pytest.raises(CheckpointError):
        encode_sections({"z": np.ones(2, dtype=np.complex128)})


def test_model_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(7, (6, 4), predictor_hidden=5, projector=True)
    p = init_params(cfg, 11)
    p.student.encoder.layers[0].bn.running_mean[:] = 0.25
    save_checkpoint(p, tmp_path / "m.sgnn")
    q = load_checkpoint(tmp_path / "m.sgnn")
    assert q.config == cfg
    for (k, v), (k2, v2) in zip(p.state_dict().items(), q.state_dict().items()):
        assert k == k2 and v.dtype == v2.dtype and np.array_equal(v, v2)
    assert "student.enc.0.W" in p.state_dict() and "teacher.enc.0.W" in p.state_dict()
    save_checkpoint(q, tmp_path / "again.sgnn")
    assert (tmp_path / "m.sgnn").read_bytes() == (tmp_path / "again.sgnn").read_bytes()


def test_missing_config_section(tmp_path):
    (tmp_path / "x.sgnn").write_bytes(encode_sections({"w": np.ones(2)}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.sgnn")
