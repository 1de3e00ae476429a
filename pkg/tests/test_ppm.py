import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tarnet.errors import FormatError
from tarnet.ppm import decode_ppm, encode_ppm, load_ppm, save_ppm

BOUND = 1 / 255 + 1e-12


def test_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, (3, 5, 7))
    save_ppm(img, tmp_path / "a.ppm")
    back = load_ppm(tmp_path / "a.ppm", np.float64)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= BOUND


def test_zeros_map_to_128():
    data = encode_ppm(np.zeros((3, 2, 2)))
    assert data.endswith(bytes([128]) * 12)
    assert np.abs(decode_ppm(data, np.float64)).max() <= BOUND


def test_header_with_comments_and_extra_whitespace():
    data = b"P6 # comment\n 2\t1 \n# another\n255\n" + bytes([0, 255, 128] * 2)
    img = decode_ppm(data, np.float64)
    np.testing.assert_allclose(img[:, 0, 0], [-1.0, 1.0, 1 / 255])


@pytest.mark.parametrize(
    "data,offset",
    [
        (b"P3\n1 1\n255\n000", 0),
        (b"P6\n1 x\n255\n000", 4),
        (b"P6\n1 1\n65535\n000000", 12),
        (b"P6\n2 2\n255\n" + b"\x00" * 5, 16),
        (b"P6\n1 1", 6),
    ],
)
def test_malformed_files_report_byte_offset(data, offset):
    with pytest.raises(FormatError) as err:
        decode_ppm(data)
    assert err.value.offset == offset
    assert f"offset {offset}" in str(err.value)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-1, 1)))
def test_round_trip_property(img):
    assert np.abs(decode_ppm(encode_ppm(img), np.float64) - img).max() <= BOUND
