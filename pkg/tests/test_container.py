import numpy as np
import pytest
from hypothesis import given, strategies as st

from asrq import container

TAGS = {"real32": np.float32, "real64": np.float64, "int8": np.int8, "int16": np.int16, "int32": np.int32}


@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=6), st.tuples(
    st.sampled_from(sorted(TAGS)), st.lists(st.integers(1, 4), min_size=1, max_size=3)), max_size=4))
def test_roundtrip(spec):
    r = np.random.default_rng(0)
    tensors = {k: (tag, (r.standard_normal(shape) * 100).astype(TAGS[tag])) for k, (tag, shape) in spec.items()}
    header = {"format": "test", "n": len(tensors)}
    h, out = container.decode(container.encode(header, tensors))
    assert h["format"] == "test"
    assert set(out) == set(tensors)
    for k, (tag, arr) in tensors.items():
        assert out[k].dtype == TAGS[tag]
        np.testing.assert_array_equal(out[k], arr)


def test_encoding_is_deterministic():
    t = {"b": ("int8", np.arange(4, dtype=np.int8)), "a": ("real32", np.ones(3, np.float32))}
    assert container.encode({"x": 1, "y": 2}, t) == container.encode({"y": 2, "x": 1}, dict(reversed(t.items())))


def test_corruption_is_detected():
    blob = container.encode({}, {"w": ("real32", np.ones(8, np.float32))})
    with pytest.raises(container.MagicError):
        container.decode(b"XXXX" + blob[4:])
    with pytest.raises(container.TruncatedError):
        container.decode(blob[:-3])
    with pytest.raises(container.LoadError):
        container.decode(blob[:6])
