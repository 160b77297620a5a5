import struct

import numpy as np
import pytest

from titan import checkpoint
from titan.errors import VersionError
from titan.model import ModelSpec, TitanModel


def small_model(seed=0, **kw):
    spec = ModelSpec(n_nodes=3, n_features=2, t_in=4, t_out=4, hidden_size=8, memory_size=6, rank=2, **kw)
    return TitanModel(spec, np.random.default_rng(seed))


def test_round_trip(tmp_path):
    m = small_model()
    checkpoint.save(tmp_path / "m.titn", m, {"note": "x"})
    back, header = checkpoint.load(tmp_path / "m.titn")
    assert header["note"] == "x" and header["version"] == checkpoint.VERSION
    for (na, pa), (nb, pb) in zip(m.named_parameters(), back.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    x = np.random.default_rng(1).normal(size=(2, 4, 3, 2))
    ts = np.zeros((2, 4), dtype=np.int64)
    assert m.predict(x, ts)[0].tobytes() == back.predict(x, ts)[0].tobytes()


def test_layout(tmp_path):
    data = checkpoint.encode(small_model())
    assert data[:4] == b"TITN"
    version, hlen = struct.unpack("<IQ", data[4:16])
    assert version == 1
    n_values = sum(p.size for p in small_model().parameters())
    assert len(data) == 16 + hlen + 8 * n_values


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(VersionError, match="magic"):
        checkpoint.load(tmp_path / "x")


def test_future_version(tmp_path):
    data = bytearray(checkpoint.encode(small_model()))
    data[4:8] = struct.pack("<I", 99)
    (tmp_path / "x").write_bytes(bytes(data))
    with pytest.raises(VersionError, match="99"):
        checkpoint.load(tmp_path / "x")


def test_truncated(tmp_path):
    data = checkpoint.encode(small_model())
    (tmp_path / "x").write_bytes(data[:-8])
    with pytest.raises(VersionError, match="truncated"):
        checkpoint.load(tmp_path / "x")


def test_spec_override_mismatch_names_field(tmp_path):
    checkpoint.save(tmp_path / "m.titn", small_model())
    with pytest.raises(VersionError, match="hidden_size"):
        checkpoint.load(tmp_path / "m.titn", {"hidden_size": 16})


def test_shape_mismatch_names_parameter():
    data = checkpoint.encode(small_model())
    spec = ModelSpec(n_nodes=4, n_features=2, t_in=4, t_out=4, hidden_size=8, memory_size=6, rank=2)
    other = TitanModel(spec, np.random.default_rng(0))
    with pytest.raises(VersionError, match="memory"):
        checkpoint.load_into(other, data)
