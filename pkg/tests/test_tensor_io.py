import json
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightlab.errors import MalformedHeader, NonFiniteValue, UnknownTensor, UnsupportedDType
from weightlab.tensor_io import (
    RawTensor,
    SkipNotice,
    TensorRecord,
    decode,
    dumps_model,
    encode,
    iter_tensors,
    load_tensor,
    read_header,
    write_model,
)


def raw_file(header: dict, data: bytes = b"") -> bytes:
    blob = json.dumps(header).encode()
    return struct.pack("<Q", len(blob)) + blob + data


def test_read_header_single_tensor_layout():
    data = struct.pack("<2f", 1.5, -2.0)
    blob = raw_file({"t": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, data)
    # length prefix is little-endian u64, JSON starts right after it
    assert blob[:8] == (len(blob) - 16).to_bytes(8, "little")
    assert blob[8:9] == b"{"

    index = read_header(blob)
    assert list(index.metas) == ["t"]
    meta = index.metas["t"]
    assert (meta.dtype, meta.shape, meta.byte_range) == ("F32", (2,), (0, 8))
    assert index.metadata is None
    assert load_tensor(index, "t").values.tolist() == [1.5, -2.0]


def test_metadata_only_file():
    index = read_header(raw_file({"__metadata__": {"k": "v"}}))
    assert index.metas == {}
    assert index.metadata == {"k": "v"}


@pytest.mark.parametrize(
    "blob, fragment",
    [
        (raw_file({"t": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4), "'t'"),
        (b"\x01\x00", "too short"),
        (struct.pack("<Q", 100) + b"{}", "exceeds"),
        (struct.pack("<Q", 3) + b"{x}", "JSON"),
        (raw_file({"t": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8), "'t'"),
        (raw_file({"t": {"dtype": "F32", "shape": [2]}}, b"\0" * 8), "missing"),
        (
            raw_file(
                {
                    "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                    "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
                },
                b"\0" * 12,
            ),
            "overlaps",
        ),
        (raw_file({"__metadata__": {"k": 1}}), "__metadata__"),
    ],
)
def test_malformed_headers(blob, fragment):
    with pytest.raises(MalformedHeader, match=fragment):
        read_header(blob)


def test_duplicate_names_rejected():
    blob = b'{"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}'
    with pytest.raises(MalformedHeader, match="duplicate"):
        read_header(struct.pack("<Q", len(blob)) + blob + b"\0" * 4)


def test_scalar_decodes():
    assert decode(b"\x00\x3c", "F16").tolist() == [1.0]
    assert decode(b"\x80\x3f", "BF16").tolist() == [1.0]
    assert decode(struct.pack("<2f", 1.0, 2.0), "F32").tolist() == [1.0, 2.0]


def test_f16_decode_total_and_ieee():
    patterns = np.arange(1 << 16, dtype=np.uint16)
    got = decode(patterns.astype("<u2").tobytes(), "F16")
    # struct's 'e' format is an independent binary16 implementation
    want = np.array([struct.unpack("<e", int(p).to_bytes(2, "little"))[0] for p in patterns])
    same = (got == want) | (np.isnan(got) & np.isnan(want))
    assert same.all()
    assert got[0x0001] == 2.0**-24  # smallest subnormal
    assert got[0x7C00] == np.inf and got[0xFC00] == -np.inf


def test_bf16_decode_total():
    patterns = np.arange(1 << 16, dtype=np.uint32)
    got = decode(patterns.astype("<u2").tobytes(), "BF16")
    want = np.array([struct.unpack("<f", struct.pack("<I", int(p) << 16))[0] for p in patterns])
    same = (got == want) | (np.isnan(got) & np.isnan(want))
    assert same.all()


def test_bf16_encode_round_to_nearest_even():
    assert decode(encode([1.0000001], "BF16"), "BF16").tolist() == [1.0]
    # exact halfway between 1.0 and 1.0078125 goes to the even mantissa (1.0)
    assert decode(encode([1.00390625], "BF16"), "BF16").tolist() == [1.0]
    # halfway between 1.0078125 (odd) and 1.015625 (even) goes up
    assert decode(encode([1.01171875], "BF16"), "BF16").tolist() == [1.015625]
    rng = np.random.default_rng(7)
    xs = rng.standard_normal(2000) * 10.0 ** rng.integers(-30, 30, 2000)
    got = decode(encode(xs, "BF16"), "BF16")
    want = [_bf16_nearest(x) for x in xs]
    assert got.tolist() == want


def _bf16_nearest(x: float) -> float:
    """Brute-force oracle: nearest bfloat16 to x, ties to an even mantissa."""
    f32 = np.float32(x)
    bits = int(np.array([f32]).view(np.uint32)[0]) >> 16
    best = None
    for b in range(bits - 2, bits + 3):
        b &= 0xFFFF
        v = float(np.array([b << 16], dtype=np.uint32).view(np.float32)[0])
        if not np.isfinite(v):
            continue
        key = (abs(Fraction(v) - Fraction(x)), b & 1)
        if best is None or key < best[0]:
            best = (key, v)
    return best[1]


def test_f16_encode_matches_struct():
    rng = np.random.default_rng(3)
    xs = rng.standard_normal(3000) * 10.0 ** rng.integers(-7, 4, 3000)
    got = encode(xs, "F16")
    want = b"".join(struct.pack("<e", float(x)) for x in xs)
    assert got == want


def test_round_trip_small():
    rec = TensorRecord.from_array("x", [1.0, 2.0], "F32")
    out = read_header(dumps_model([rec]))
    assert out.load("x").values.tolist() == [1.0, 2.0]


def test_round_trip_random_f32_bit_exact():
    rng = np.random.default_rng(0)
    payload = rng.standard_normal(1024).astype("<f4").tobytes()
    rec = TensorRecord("w", (32, 32), decode(payload, "F32"), "F32")
    index = read_header(dumps_model([rec]))
    assert index.raw_bytes("w") == payload


def test_iter_tensors_filter_and_skip():
    recs = [TensorRecord.from_array(n, np.ones(2)) for n in ("a.attn.q", "a.mlp.up", "b.attn.k")]
    raw = RawTensor("b.attn.pos", "I64", (2,), struct.pack("<2q", 1, 2))
    index = read_header(dumps_model(recs + [raw]))
    got = list(iter_tensors(index, r".*attn.*"))
    assert [g.name for g in got] == ["a.attn.q", "b.attn.k", "b.attn.pos"]
    assert isinstance(got[-1], SkipNotice) and got[-1].dtype == "I64"
    assert [g.name for g in iter_tensors(index)] == [
        "a.attn.q",
        "a.mlp.up",
        "b.attn.k",
        "b.attn.pos",
    ]
    with pytest.raises(UnsupportedDType):
        load_tensor(index, "b.attn.pos")
    with pytest.raises(UnknownTensor):
        load_tensor(index, "nope")
    assert index.raw_bytes("b.attn.pos") == struct.pack("<2q", 1, 2)


def test_nonfinite_preserved_and_policy(tmp_path):
    rec = TensorRecord.from_array("x", [1.0, np.nan, np.inf], "F32")
    assert rec.has_nonfinite
    back = read_header(dumps_model([rec])).load("x").values
    assert np.isnan(back[1]) and back[2] == np.inf
    with pytest.raises(NonFiniteValue):
        write_model([rec], tmp_path / "x.safetensors", allow_nonfinite=False)


def test_memory_mapped_file(tmp_path):
    path = tmp_path / "m.safetensors"
    write_model([TensorRecord.from_array("w", np.arange(6.0).reshape(2, 3))], path, metadata={"a": "b"})
    with read_header(path) as index:
        rec = index.load("w")
    assert rec.shape == (2, 3)
    assert rec.values.tolist() == [[0, 1, 2], [3, 4, 5]]
    assert index.metadata == {"a": "b"}


def test_interop_with_reference_library(tmp_path):
    st_numpy = pytest.importorskip("safetensors.numpy")
    arrays = {
        "z": np.arange(5, dtype=np.float32),
        "a": np.linspace(-1, 1, 6, dtype=np.float16).reshape(2, 3),
        "i": np.array([1, 2, 3], dtype=np.int64),
    }
    blob = st_numpy.save(arrays, metadata={"fmt": "np"})
    index = read_header(blob)
    assert index.metadata == {"fmt": "np"}
    assert index.load("z").values.tolist() == arrays["z"].tolist()
    assert index.load("a").values.tolist() == arrays["a"].astype(np.float64).tolist()
    assert index.raw_bytes("i") == arrays["i"].tobytes()

    ours = dumps_model(
        [
            TensorRecord.from_array("w", np.arange(4.0), "F64"),
            TensorRecord.from_array("h", [0.5, -0.25], "F16"),
        ]
    )
    loaded = st_numpy.load(ours)
    assert loaded["w"].dtype == np.float64 and loaded["w"].tolist() == [0, 1, 2, 3]
    assert loaded["h"].dtype == np.float16 and loaded["h"].tolist() == [0.5, -0.25]


_DTYPES = st.sampled_from(["F32", "F16", "BF16", "F64"])


@st.composite
def records(draw):
    n = draw(st.integers(1, 6))
    names = draw(st.lists(st.text("abc.0123", min_size=1, max_size=8), min_size=n, max_size=n, unique=True))
    out = []
    for name in names:
        shape = tuple(draw(st.lists(st.integers(0, 4), min_size=0, max_size=3)))
        dtype = draw(_DTYPES)
        size = int(np.prod(shape)) if shape else 1
        vals = draw(
            st.lists(st.floats(-1e4, 1e4, allow_nan=False, width=16), min_size=size, max_size=size)
        )
        vals = np.array(vals, dtype=np.float64)
        if dtype == "BF16":
            vals = decode(encode(vals, "BF16"), "BF16")
        out.append(TensorRecord(name, shape, vals, dtype))
    return out


@settings(max_examples=60, deadline=None)
@given(records())
def test_round_trip_property(recs):
    blob = dumps_model(recs)
    index = read_header(blob)
    assert list(index.metas) == [r.name for r in recs]
    for r in recs:
        back = index.load(r.name)
        assert back.shape == r.shape
        assert back.source_dtype == r.source_dtype
        # drawn on each dtype's grid, so decoding is exact
        assert back.values.tolist() == r.values.tolist()
    assert dumps_model([index.load(r.name) for r in recs]) == blob
