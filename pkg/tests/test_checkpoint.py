import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from padnet import checkpoint as ck


def sample():
    return {"w": np.arange(6.0).reshape(2, 3), "n": np.array([3, -1], dtype=np.int64),
            "mask": np.array([1, 0, 1, 1, 0, 0, 0, 1, 1], dtype=bool)}


def test_roundtrip_bit_exact(tmp_path):
    t = sample()
    size = ck.save(tmp_path / "a.ck", t, {"lambda": [0.5, 1.5]})
    assert size == (tmp_path / "a.ck").stat().st_size
    out, meta = ck.load(tmp_path / "a.ck")
    assert list(out) == list(t)
    for k in t:
        assert out[k].dtype == t[k].dtype and out[k].tobytes() == t[k].tobytes()
    assert meta == {"lambda": [0.5, 1.5]}
    assert not (tmp_path / "a.ck.tmp").exists()


def test_layout_prefix_and_packed_bits():
    blob = ck.dumps(sample())
    assert blob[:8] == b"PADNETCK"
    version, hlen = struct.unpack("<IQ", blob[8:20])
    assert version == 1
    # 48 + 16 bytes of numbers, 9 mask bits in 2 bytes
    assert len(blob) == 20 + hlen + 48 + 16 + 2


def test_dumps_deterministic():
    assert ck.dumps(sample(), {"b": 1, "a": 2}) == ck.dumps(sample(), {"a": 2, "b": 1})


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(1, 4))),
       arrays(np.bool_, st.integers(0, 40)))
def test_roundtrip_property(values, bits):
    out, _ = ck.loads(ck.dumps({"v": values, "b": bits}))
    assert out["v"].tobytes() == values.tobytes() and out["v"].shape == values.shape
    assert out["b"].tolist() == bits.tolist()


def test_errors_report_offsets():
    blob = ck.dumps(sample())
    with pytest.raises(ck.CheckpointError) as e:
        ck.loads(b"XXXXXXXX" + blob[8:])
    assert e.value.offset == 0
    with pytest.raises(ck.CheckpointError) as e:
        ck.loads(blob[:8] + struct.pack("<I", 9) + blob[12:])
    assert e.value.offset == 8
    with pytest.raises(ck.CheckpointError) as e:
        ck.loads(blob[:12] + struct.pack("<Q", 10**9) + blob[20:])
    assert e.value.offset == 12
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.loads(blob[:-3])
    with pytest.raises(ck.CheckpointError, match="trailing") as e:
        ck.loads(blob + b"\x00")
    assert e.value.offset == len(blob)
    with pytest.raises(ck.CheckpointError):
        ck.loads(blob[:10])


def test_unsupported_dtype_and_bit_rank():
    with pytest.raises(TypeError):
        ck.dumps({"c": np.zeros(2, dtype=np.complex128)})
    with pytest.raises(ValueError):
        ck.dumps({"m": np.zeros((2, 2), dtype=bool)})


def test_scalar_count_excludes_masks():
    assert ck.scalar_count(sample()) == 8
    assert ck.scalar_count(sample(), include_bits=True) == 17
