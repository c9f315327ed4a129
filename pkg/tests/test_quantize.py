import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halo import hadamard as had
from halo.quantize import (
    MX_BLOCK,
    PER_COLUMN,
    PER_ROW,
    PER_TENSOR,
    Granularity,
    NumericFormat,
    QuantizedTensor,
    block,
    compute_scale,
    decode_quantized,
    dequantize,
    encode_quantized,
    fp_round,
    qmatmul,
    quantization_error_report,
    quantize,
    representable_values,
    round_scalar,
)
from halo.tensor_core import OutlierProfile, TensorFormatError, random_tensor

F = NumericFormat
FP_FORMATS = [F.FP8_E4M3, F.FP6_E3M2]
SCALED = [F.INT8, F.FP8_E4M3, F.FP6_E3M2, F.MXFP6_E3M2]


def brute_force(x, fmt):
    """Nearest representable value by exhaustive search; ties to the even bit pattern."""
    grid = representable_values(fmt)
    ax = min(abs(x), grid[-1])
    d = np.abs(grid - ax)
    best = np.flatnonzero(d == d.min())
    k = best[0] if len(best) == 1 else [i for i in best if i % 2 == 0][0]
    return math.copysign(grid[k], x)


# --- formats


def test_format_constants():
    assert F.INT8.max_value == 127
    assert F.FP8_E4M3.max_value == 448
    assert F.FP6_E3M2.max_value == 28
    assert [F.parse(n) for n in ("int8", "fp8", "E4M3", "fp6", "mxfp6", "bf16", "identity")] == [
        F.INT8, F.FP8_E4M3, F.FP8_E4M3, F.FP6_E3M2, F.MXFP6_E3M2, F.BF16EMU, F.IDENTITY]
    with pytest.raises(ValueError):
        F.parse("fp4")


def test_value_sets():
    e4m3 = representable_values(F.FP8_E4M3)
    e3m2 = representable_values(F.FP6_E3M2)
    assert len(e4m3) == 127 and e4m3[-1] == 448 and e4m3[1] == 2.0**-9
    assert len(e3m2) == 32 and e3m2[-1] == 28 and e3m2[1] == 0.0625
    assert np.all(np.diff(e4m3) > 0) and np.all(np.diff(e3m2) > 0)


def test_granularity_parsing_and_transpose():
    assert Granularity.parse("row") == PER_ROW
    assert Granularity.parse("block32x32") == block(32, 32)
    assert Granularity.parse("block4x8").transpose() == block(8, 4)
    assert PER_ROW.transpose() == PER_COLUMN
    assert MX_BLOCK.transpose().block == (32, 1)
    with pytest.raises(ValueError):
        Granularity.parse("diagonal")


# --- scalar rounding


@pytest.mark.parametrize("fmt", FP_FORMATS)
def test_fp_rounding_matches_exhaustive_search(fmt):
    grid = representable_values(fmt)
    mids = (grid[1:] + grid[:-1]) / 2
    rng = np.random.default_rng(0)
    xs = np.concatenate([grid, mids, np.nextafter(mids, 0), np.nextafter(mids, np.inf),
                         rng.uniform(0, grid[-1] * 1.2, 2000), [grid[-1] * 10]])
    xs = np.concatenate([xs, -xs])
    got = fp_round(xs, fmt)
    want = np.array([brute_force(x, fmt) for x in xs])
    assert np.array_equal(got, want)


def test_rounding_examples():
    assert round_scalar(250.0, F.FP8_E4M3) == 256
    assert round_scalar(30.0, F.FP6_E3M2) == 28
    assert round_scalar(1000.0, F.FP8_E4M3) == 448
    assert round_scalar(2.5, F.INT8) == 2  # ties to even
    assert round_scalar(-300.0, F.INT8) == -127


def test_bf16_rounding():
    x = np.array([1.0 + 2.0**-8, 1.0 + 3 * 2.0**-8, 1.0 + 2.0**-9])
    assert round_scalar(x, F.BF16EMU).tolist() == [1.0, 1.0 + 2.0**-6, 1.0]


# --- scales


def test_scale_examples():
    assert compute_scale([[-2, 1]], F.INT8, PER_TENSOR)[0, 0] == pytest.approx(0.015748, abs=1e-6)
    assert compute_scale(np.zeros((3, 3)), F.INT8, PER_TENSOR)[0, 0] == 1.0
    s = compute_scale([[1, 0], [0, 448]], F.FP8_E4M3, PER_ROW)
    assert s.ravel().tolist() == [1 / 448, 1.0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 64), elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_mx_scales_are_powers_of_two_and_cover_the_max(a):
    s = compute_scale(a, F.MXFP6_E3M2, MX_BLOCK)
    assert s.shape == (4, 2)
    m, _ = np.frexp(s)
    assert np.all(m == 0.5)
    q = quantize(a, F.MXFP6_E3M2, MX_BLOCK)
    assert np.all(np.abs(q.codes) <= 28)


def test_mx_requantization_can_rescale():
    q = quantize([[57.0]], F.MXFP6_E3M2)
    assert (q.codes[0, 0], q.scales[0, 0]) == (14.0, 4.0)
    again = quantize(dequantize(q), F.MXFP6_E3M2)
    assert (again.codes[0, 0], again.scales[0, 0]) == (28.0, 2.0)
    assert dequantize(again)[0, 0] == dequantize(q)[0, 0] == 56.0


def test_block_granularity_pads_without_leaking():
    a = np.arange(1, 31, dtype=np.float64).reshape(5, 6)
    q = quantize(a, F.INT8, block(4, 4))
    assert q.scales.shape == (2, 2)
    assert q.codes.shape == (5, 6)
    assert q.scales[1, 1] == pytest.approx(30 / 127)


# --- quantize / dequantize


def test_quantize_example():
    q = quantize([[-2.0, 1.0]], F.INT8, PER_TENSOR)
    assert q.codes.tolist() == [[-127, 64]]
    assert q.codes.dtype == np.int8
    assert q.scales[0, 0] == 2 / 127
    q = quantize([[250.0]], F.FP8_E4M3, PER_TENSOR, scales=[[1.0]])
    assert q.codes[0, 0] == 256
    q = quantize([[30.0]], F.FP6_E3M2, PER_TENSOR, scales=[[1.0]])
    assert q.codes[0, 0] == 28


def test_dequantize_examples():
    q = QuantizedTensor(np.array([[64]], np.int8), np.array([[2 / 127]]), F.INT8, PER_TENSOR)
    assert dequantize(q)[0, 0] == pytest.approx(1.00787, abs=1e-5)
    a = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    out = dequantize(quantize(a, F.IDENTITY))
    assert out.dtype == a.dtype and out.tobytes() == a.tobytes()


def test_bad_supplied_scales():
    with pytest.raises(ValueError):
        quantize([[1.0]], F.INT8, PER_TENSOR, scales=[[0.0]])
    with pytest.raises(ValueError):
        quantize([[1.0]], F.INT8, PER_TENSOR, scales=[[-1.0]])
    with pytest.raises(ValueError):
        quantize([[np.nan]], F.INT8)


matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 40)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False))
grans = st.sampled_from([PER_TENSOR, PER_ROW, PER_COLUMN, block(2, 8)])


@settings(max_examples=150, deadline=None)
@given(matrices, st.sampled_from(SCALED), grans)
def test_quantizer_properties(a, fmt, gran):
    if fmt is F.MXFP6_E3M2:
        gran = MX_BLOCK
    q = quantize(a, fmt, gran)
    # symmetry
    assert np.array_equal(quantize(-a, fmt, gran).codes, -q.codes)
    # saturation
    bound = q.scales.max() * fmt.max_value
    assert np.all(np.abs(dequantize(q)) <= bound * (1 + 1e-12))
    # idempotence: code level for free scales; MX power-of-two scales can halve when a
    # block max rounds down to exactly half the range, so MX is checked on values
    again = quantize(dequantize(q), fmt, gran)
    if fmt is F.MXFP6_E3M2:
        assert np.array_equal(dequantize(again), dequantize(q))
    else:
        assert np.array_equal(again.codes, q.codes)
    # reconstruction error at most half a quantum of the largest step
    if fmt is F.INT8:
        err = np.abs(dequantize(q) - a)
        from halo.quantize import expand_scales
        assert np.all(err <= 0.5 * expand_scales(q.scales, gran, a.shape) * (1 + 1e-9))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_grid_values_reconstruct_exactly(r, c, seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(-127, 128, size=(r, c))
    codes[0, 0] = 127
    a = codes * 0.25  # scale 0.25 is exact in binary
    q = quantize(a, F.INT8, PER_TENSOR)
    assert np.array_equal(dequantize(q), a)


def test_error_report_examples():
    assert quantization_error_report([[127.0, -3.0, 0.0]], F.INT8).mse == 0
    assert quantization_error_report(np.zeros((4, 4)), F.FP8_E4M3).mse == 0
    worse = 0
    for seed in range(10):
        prof = OutlierProfile.random(64, 2, 30.0, "columns", seed)
        a = random_tensor(64, 64, seed, np.float64, prof)
        raw = quantization_error_report(a, F.INT8, PER_TENSOR).mse
        rot = quantization_error_report(had.transform_right(a), F.INT8, PER_TENSOR).mse
        worse += rot >= raw
    assert worse == 0


# --- qmatmul


def test_qmatmul_identity_format():
    B = np.random.default_rng(1).standard_normal((4, 3))
    out = qmatmul(quantize(np.eye(4), F.IDENTITY), quantize(B, F.IDENTITY))
    assert np.array_equal(out, B)


def test_qmatmul_exact_unit_product():
    s = np.array([[1 / 127]])
    qa = QuantizedTensor(np.array([[127]], np.int8), s, F.INT8, PER_TENSOR)
    assert qmatmul(qa, qa)[0, 0] == 1.0


def test_qmatmul_int8_matches_dequantized_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, k, m = rng.integers(1, 16, size=3)
        qa = quantize(rng.standard_normal((n, k)) * rng.uniform(0.01, 100), F.INT8, PER_TENSOR)
        qb = quantize(rng.standard_normal((m, k)), F.INT8, PER_TENSOR)
        got = qmatmul(qa, qb, transpose_b=True)
        want = dequantize(qa) @ dequantize(qb).T
        assert np.allclose(got, want, rtol=1e-6, atol=1e-12 * np.abs(want).max())


def test_qmatmul_other_granularities_dequantize():
    rng = np.random.default_rng(3)
    qa = quantize(rng.standard_normal((5, 8)), F.FP8_E4M3, PER_ROW)
    qb = quantize(rng.standard_normal((8, 3)), F.INT8, PER_COLUMN)
    assert np.allclose(qmatmul(qa, qb), dequantize(qa) @ dequantize(qb), rtol=1e-12)


def test_qmatmul_shape_mismatch():
    q = quantize(np.ones((2, 3)), F.INT8)
    with pytest.raises(ValueError):
        qmatmul(q, q)


def test_transpose_keeps_values():
    a = np.random.default_rng(2).standard_normal((3, 64))
    q = quantize(a, F.MXFP6_E3M2)
    assert np.array_equal(q.T.dequantize(), q.dequantize().T)


# --- quantized tensor files


@pytest.mark.parametrize("fmt,gran", [(F.INT8, PER_TENSOR), (F.INT8, PER_ROW), (F.FP8_E4M3, block(2, 4)),
                                      (F.MXFP6_E3M2, MX_BLOCK), (F.IDENTITY, PER_TENSOR)])
def test_quantized_file_round_trip(fmt, gran):
    a = np.random.default_rng(5).standard_normal((6, 40))
    q = quantize(a, fmt, gran)
    assert decode_quantized(encode_quantized(q)).equals(q)


def test_quantized_file_errors():
    buf = encode_quantized(quantize(np.ones((2, 2)), F.INT8))
    assert buf[:4] == b"HALQ"
    with pytest.raises(TensorFormatError, match="bad magic"):
        decode_quantized(b"HALT" + buf[4:])
    with pytest.raises(TensorFormatError, match="truncated"):
        decode_quantized(buf[:-1])
    with pytest.raises(TensorFormatError, match="trailing"):
        decode_quantized(buf + b"\0")
