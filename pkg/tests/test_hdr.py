import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lightforge import hdr
from lightforge.hdr import (
    HdrImage,
    LdrImage,
    PfmError,
    blackbody_rgb,
    hsv_to_rgb,
    read_pfm,
    read_pfm_array,
    srgb_decode,
    srgb_encode,
    tone_map_srgb,
    write_pfm,
    write_pfm_array,
)


# --- containers ---------------------------------------------------------------

def test_hdr_image_accepts_valid_pixels():
    img = HdrImage(np.zeros((2, 3, 3), dtype=np.float32))
    assert img.height == 2 and img.width == 3


@pytest.mark.parametrize(
    "bad",
    [
        np.zeros((2, 3), dtype=np.float32),
        np.zeros((2, 3, 4), dtype=np.float32),
        np.full((1, 1, 3), -0.1, dtype=np.float32),
        np.full((1, 1, 3), np.nan, dtype=np.float32),
        np.full((1, 1, 3), np.inf, dtype=np.float32),
    ],
)
def test_hdr_image_rejects_bad_pixels(bad):
    with pytest.raises(ValueError):
        HdrImage(bad)


def test_ldr_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        LdrImage(np.full((1, 1, 3), 1.5, dtype=np.float32))


# --- sRGB transfer -------------------------------------------------------------

def test_srgb_fixed_points():
    assert srgb_encode(np.array(0.0)) == 0.0
    assert srgb_encode(np.array(1.0)) == pytest.approx(1.0, abs=1e-12)
    assert srgb_decode(np.array(0.0)) == 0.0
    assert srgb_decode(np.array(1.0)) == pytest.approx(1.0, abs=1e-12)


def test_srgb_midgray():
    # frozen from 1.055 * 0.5**(1/2.4) - 0.055
    assert float(srgb_encode(np.array(0.5))) == pytest.approx(0.7353569830524495, abs=1e-12)


def test_srgb_linear_segment():
    assert float(srgb_encode(np.array(0.0015))) == pytest.approx(12.92 * 0.0015, abs=1e-15)


def test_srgb_knee_is_continuous():
    knee = 0.0031308
    below = float(srgb_encode(np.array(knee - 1e-9)))
    above = float(srgb_encode(np.array(knee + 1e-9)))
    assert abs(above - below) < 1e-6


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_srgb_round_trip(x):
    assert float(srgb_decode(srgb_encode(np.array(x)))) == pytest.approx(x, abs=1e-12)


def test_srgb_monotone():
    xs = np.linspace(0.0, 1.0, 1001)
    ys = srgb_encode(xs)
    assert (np.diff(ys) > 0).all()


def test_tone_map_clamps_and_encodes():
    img = HdrImage(np.array([[[0.0, 0.5, 4.0]]], dtype=np.float32))
    ldr = tone_map_srgb(img)
    assert ldr.data[0, 0, 0] == 0.0
    assert ldr.data[0, 0, 1] == pytest.approx(0.7353569830524495, abs=1e-6)
    assert ldr.data[0, 0, 2] == 1.0


def test_tone_map_reports_frame_on_bad_input():
    img = HdrImage(np.ones((1, 1, 3), dtype=np.float32))
    img.data[0, 0, 0] = np.nan  # bypass the constructor check
    with pytest.raises(ValueError, match="frame-007"):
        tone_map_srgb(img, frame="frame-007")


# --- blackbody color ------------------------------------------------------------

def _blackbody_oracle(temperature):
    """Independent route: Simpson integration of Planck x CMF at 0.25 nm."""
    from scipy.integrate import simpson

    lam = np.arange(360.0, 830.0 + 1e-9, 0.25)
    spec = hdr.planck_spectrum(lam, temperature)
    cmf = hdr.cie_xyz_bar(lam)
    xyz = np.array([simpson(spec * cmf[:, i], x=lam) for i in range(3)])
    rgb = np.maximum(hdr.XYZ_TO_SRGB @ xyz, 0.0)
    return rgb / rgb.max()


@pytest.mark.parametrize("temp", [1000.0, 2500.0, 4000.0, 6504.0, 10500.0, 20000.0])
def test_blackbody_matches_independent_integration(temp):
    got = blackbody_rgb(temp)
    want = _blackbody_oracle(temp)
    assert np.abs(got - want).max() < 1e-4


def test_blackbody_max_component_is_one():
    for temp in np.linspace(1000.0, 20000.0, 39):
        rgb = blackbody_rgb(float(temp))
        assert rgb.max() == 1.0
        assert (rgb >= 0.0).all()


def test_blackbody_warm_is_red_dominant():
    r, g, b = blackbody_rgb(2500.0)
    assert r == 1.0 and r > g > b


def test_blackbody_cool_is_blue_dominant():
    r, g, b = blackbody_rgb(10500.0)
    assert b == 1.0 and b > g > r


def test_blackbody_continuity_in_temperature():
    temps = np.arange(1000.0, 20000.0, 250.0)
    for t in temps:
        step = np.abs(blackbody_rgb(float(t) + 1.0) - blackbody_rgb(float(t)))
        assert step.max() < 0.01


@pytest.mark.parametrize("temp", [999.9, 20000.1, -5.0])
def test_blackbody_range_errors(temp):
    with pytest.raises(ValueError):
        blackbody_rgb(temp)


# --- HSV -------------------------------------------------------------------------

def test_hsv_known_values():
    assert np.allclose(hsv_to_rgb(0.0, 0.0, 1.0), [1, 1, 1])
    assert np.allclose(hsv_to_rgb(0.0, 1.0, 1.0), [1, 0, 0])
    assert np.allclose(hsv_to_rgb(0.5, 0.5, 0.8), [0.4, 0.8, 0.8])


def test_hsv_range_checks():
    with pytest.raises(ValueError):
        hsv_to_rgb(1.0, 0.5, 0.5)  # hue wraps, 1.0 excluded
    with pytest.raises(ValueError):
        hsv_to_rgb(0.5, 1.5, 0.5)
    with pytest.raises(ValueError):
        hsv_to_rgb(0.5, 0.5, -0.1)


@given(
    st.floats(min_value=0.0, max_value=0.999999, allow_nan=False),
    st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
)
def test_hsv_output_in_unit_cube(h, s, v):
    rgb = hsv_to_rgb(h, s, v)
    assert (rgb >= 0.0).all() and (rgb <= 1.0).all()
    assert rgb.max() == pytest.approx(v, abs=1e-12)


# --- PFM -------------------------------------------------------------------------

def test_pfm_header_layout():
    img = np.array([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]], dtype=np.float32)  # 1 row, 2 cols
    blob = write_pfm_array(img)
    assert blob.startswith(b"PF\n2 1\n-1.0\n")
    payload = np.frombuffer(blob[len(b"PF\n2 1\n-1.0\n"):], dtype="<f4")
    assert payload.tolist() == [1, 2, 3, 4, 5, 6]


def test_pfm_rows_stored_bottom_up():
    img = np.zeros((2, 1, 3), dtype=np.float32)
    img[0, 0] = (1.0, 2.0, 3.0)  # top row
    img[1, 0] = (4.0, 5.0, 6.0)  # bottom row
    blob = write_pfm_array(img)
    payload = np.frombuffer(blob.split(b"-1.0\n", 1)[1], dtype="<f4")
    assert payload.tolist() == [4, 5, 6, 1, 2, 3]  # bottom row first


def test_pfm_round_trip_exact():
    rng = np.random.default_rng(3)
    img = rng.gamma(1.5, 2.0, size=(7, 5, 3)).astype(np.float32)
    back = read_pfm_array(write_pfm_array(img))
    assert back.dtype == np.float32
    assert np.array_equal(back, img)


@settings(max_examples=40, deadline=None)
@given(
    arrays(
        np.float32,
        st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
        elements=st.floats(
            min_value=0.0, max_value=1e6, allow_nan=False, width=32
        ),
    )
)
def test_pfm_round_trip_property(img):
    assert np.array_equal(read_pfm_array(write_pfm_array(img)), img)


def test_pfm_hdr_image_round_trip():
    img = HdrImage(np.arange(12, dtype=np.float32).reshape(2, 2, 3))
    back = read_pfm(write_pfm(img))
    assert np.array_equal(back.data, img.data)


def test_pfm_reads_big_endian_scale():
    # positive scale marks big-endian payloads
    data = np.array([[[1.0, 2.0, 3.0]]], dtype=">f4")
    blob = b"PF\n1 1\n1.0\n" + data.tobytes()
    out = read_pfm_array(blob)
    assert out.tolist() == [[[1.0, 2.0, 3.0]]]


@pytest.mark.parametrize(
    "blob",
    [
        b"Pf\n1 1\n-1.0\n" + b"\x00" * 4,  # grayscale not supported
        b"XX\n1 1\n-1.0\n" + b"\x00" * 12,
        b"PF\n1 1\n-1.0\n" + b"\x00" * 8,  # truncated payload
        b"PF\n0 1\n-1.0\n",
        b"PF\n1 1\n0.0\n" + b"\x00" * 12,  # zero scale is meaningless
        b"PF\n1 1\n-1.0",  # header never terminates
    ],
)
def test_pfm_rejects_malformed(blob):
    with pytest.raises(PfmError):
        read_pfm_array(blob)


def test_pfm_error_points_at_byte_offset():
    with pytest.raises(PfmError, match="byte"):
        read_pfm_array(b"PF\n1 x\n-1.0\n" + b"\x00" * 12)
