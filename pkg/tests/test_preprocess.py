import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from conftest import DATA
from leafvein.errors import ConfigError
from leafvein.preprocess import (
    CHANNEL_CENTER_MEANS,
    NormalizationScheme,
    Scheme,
    VenationConfig,
    backbone_native,
    channel_center,
    complement,
    gradient_magnitude,
    median_filter,
    normalize_for_model,
    preprocess_directory,
    sobel_gradients,
    to_grayscale,
    unit_scale,
    venation_pipeline,
    venation_stages,
)

GOLDEN = DATA / "reference_leaf_venation.png"


def naive_median(img, k):
    r = k // 2
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            window = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    window.append(int(img[yy, xx]))
            window.sort()
            out[y, x] = window[len(window) // 2]
    return out


def naive_sobel(img):
    h, w = img.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    gx = np.zeros((h, w), dtype=np.int64)
    gy = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            sx = sy = 0
            for i in range(3):
                for j in range(3):
                    v = int(img[min(max(y + i - 1, 0), h - 1), min(max(x + j - 1, 0), w - 1)])
                    sx += kx[i][j] * v
                    sy += kx[j][i] * v
            gx[y, x], gy[y, x] = sx, sy
    return gx, gy


# --- grayscale ---------------------------------------------------------------

@pytest.mark.parametrize("rgb, expected", [((255, 255, 255), 255), ((0, 0, 0), 0), ((255, 0, 0), 76)])
def test_grayscale_examples(rgb, expected):
    img = np.zeros((4, 5, 3), dtype=np.uint8) + np.array(rgb, dtype=np.uint8)
    assert np.all(to_grayscale(img) == expected)


def test_grayscale_rejects_wrong_channels():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((4, 4), dtype=np.uint8))


def test_grayscale_matches_scalar_formula():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    g = to_grayscale(img)
    for (y, x), v in np.ndenumerate(g):
        r, gg, b = (int(c) for c in img[y, x])
        assert v == int(np.floor(0.299 * r + 0.587 * gg + 0.114 * b + 0.5)) or abs(
            v - (0.299 * r + 0.587 * gg + 0.114 * b)) <= 0.5


# --- median ------------------------------------------------------------------

def test_median_constant_unchanged():
    img = np.full((9, 9), 77, dtype=np.uint8)
    assert np.array_equal(median_filter(img, 3), img)


def test_median_removes_salt():
    img = np.zeros((7, 7), dtype=np.uint8)
    img[3, 3] = 255
    assert median_filter(img, 3)[3, 3] == 0


@pytest.mark.parametrize("kernel", [3, 5])
def test_median_matches_window_sort_oracle(kernel):
    rng = np.random.default_rng(kernel)
    for _ in range(5):
        img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        assert np.array_equal(median_filter(img, kernel), naive_median(img, kernel))


@pytest.mark.parametrize("kernel", [2, 4, 1])
def test_median_rejects_bad_kernel(kernel):
    with pytest.raises(ValueError):
        median_filter(np.zeros((8, 8), dtype=np.uint8), kernel)


def test_median_binary_not_idempotent_counterexample():
    # one pass is not a projection; border replication keeps eroding a checkerboard
    img = ((np.indices((6, 6)).sum(axis=0) % 2) * 255).astype(np.uint8)
    once = median_filter(img, 3)
    assert not np.array_equal(median_filter(once, 3), once)


def test_median_binary_converges_to_root():
    rng = np.random.default_rng(1)
    for _ in range(50):
        img = (rng.integers(0, 2, (16, 16)) * 255).astype(np.uint8)
        cur = img
        for _ in range(64):
            nxt = median_filter(cur, 3)
            if np.array_equal(nxt, cur):
                break
            cur = nxt
        else:
            pytest.fail("no root reached")
        assert np.array_equal(median_filter(cur, 3), cur)
        assert set(np.unique(cur)) <= {0, 255}


# --- sobel -------------------------------------------------------------------

def test_sobel_constant_is_zero():
    gx, gy = sobel_gradients(np.full((8, 8), 200, dtype=np.uint8))
    assert not gx.any() and not gy.any()


def test_sobel_vertical_step():
    img = np.zeros((8, 10), dtype=np.uint8)
    img[:, 5:] = 255
    gx, gy = sobel_gradients(img)
    assert np.all(np.abs(gx[:, 4]) == 1020) and np.all(np.abs(gx[:, 5]) == 1020)
    assert not gx[:, :4].any() and not gx[:, 6:].any()
    assert not gy[1:-1].any()
    assert gx.dtype.kind == "i" and gx.min() >= 0  # signed, not clamped: dark->bright is positive


def test_sobel_transpose_swaps_axes():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (12, 9), dtype=np.uint8)
    gx, gy = sobel_gradients(img)
    tx, ty = sobel_gradients(img.T.copy())
    assert np.array_equal(tx, gy.T) and np.array_equal(ty, gx.T)


def test_sobel_matches_hand_convolution():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (11, 13), dtype=np.uint8)
    gx, gy = sobel_gradients(img)
    ox, oy = naive_sobel(img)
    assert np.array_equal(gx, ox) and np.array_equal(gy, oy)


def test_sobel_keeps_negative_values():
    img = np.zeros((6, 6), dtype=np.uint8)
    img[:, :3] = 255
    gx, _ = sobel_gradients(img)
    assert gx.min() == -1020


# --- magnitude ---------------------------------------------------------------

def test_magnitude_zero_field():
    z = np.zeros((5, 5))
    assert not gradient_magnitude(z, z).any()


def test_magnitude_pythagorean_peak():
    gx = np.zeros((4, 4))
    gy = np.zeros((4, 4))
    gx[1, 2], gy[1, 2] = 3, 4
    gx[0, 0] = 3  # magnitude 3 of peak 5
    m = gradient_magnitude(gx, gy, "euclidean")
    assert m[1, 2] == 255
    assert m[0, 0] == round(3 / 5 * 255)
    assert m.sum() == 255 + 153


def test_magnitude_shape_mismatch():
    with pytest.raises(ValueError):
        gradient_magnitude(np.zeros((3, 3)), np.zeros((3, 4)))


def test_euclidean_not_above_absolute_sum():
    rng = np.random.default_rng(4)
    gx = rng.integers(-1020, 1021, (20, 20)).astype(float)
    gy = rng.integers(-1020, 1021, (20, 20)).astype(float)
    assert np.all(np.hypot(gx, gy) <= np.abs(gx) + np.abs(gy) + 1e-9)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.int64, (6, 6), elements=st.integers(-1020, 1020)),
    arrays(np.int64, (6, 6), elements=st.integers(-1020, 1020)),
    st.integers(-6, 6),
    st.sampled_from(["euclidean", "absolute_sum"]),
)
def test_magnitude_scale_covariant(gx, gy, power, mode):
    c = 2.0 ** power  # exact scaling in binary floating point
    assert np.array_equal(gradient_magnitude(gx, gy, mode), gradient_magnitude(gx * c, gy * c, mode))


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.int64, (6, 6), elements=st.integers(-1020, 1020)),
    arrays(np.int64, (6, 6), elements=st.integers(-1020, 1020)),
    st.floats(0.01, 100.0),
)
def test_magnitude_scale_covariant_any_factor(gx, gy, c):
    a = gradient_magnitude(gx, gy).astype(int)
    b = gradient_magnitude(gx * c, gy * c).astype(int)
    # only a rounding tie at .5 can move a level
    assert np.abs(a - b).max() <= 1


# --- complement --------------------------------------------------------------

def test_complement_examples():
    assert complement(np.array([[0, 255]], dtype=np.uint8)).tolist() == [[255, 0]]


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, (8, 8)))
def test_complement_involution(img):
    assert np.array_equal(complement(complement(img)), img)


def test_complement_mean_identity():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (64, 64), dtype=np.uint8)
    assert img.mean() + complement(img).mean() == pytest.approx(255.0, abs=1e-9)


# --- pipeline ----------------------------------------------------------------

def test_pipeline_constant_color_gives_white():
    img = np.zeros((20, 20, 3), dtype=np.uint8) + np.array([30, 140, 60], dtype=np.uint8)
    assert np.all(venation_pipeline(img) == 255)


def test_pipeline_is_composition_of_stages(reference_leaf):
    cfg = VenationConfig(3, "euclidean")
    stages = venation_stages(reference_leaf, cfg)
    gray = to_grayscale(reference_leaf)
    med = median_filter(gray, 3)
    gx, gy = sobel_gradients(med)
    mag = gradient_magnitude(gx, gy, "euclidean")
    assert np.array_equal(stages["grayscale"], gray)
    assert np.array_equal(stages["median"], med)
    assert np.array_equal(stages["sobel_x"], gx) and np.array_equal(stages["sobel_y"], gy)
    assert np.array_equal(stages["magnitude"], mag)
    assert np.array_equal(venation_pipeline(reference_leaf, cfg), complement(mag))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (12, 12, 3)), st.sampled_from([3, 5]), st.sampled_from(["euclidean", "absolute_sum"]))
def test_pipeline_output_in_range_and_deterministic(img, k, mode):
    cfg = VenationConfig(k, mode)
    a = venation_pipeline(img, cfg)
    assert a.dtype == np.uint8 and a.shape == img.shape[:2]
    assert np.array_equal(a, venation_pipeline(img.copy(), cfg))


def test_golden_file_regression(reference_leaf):
    out = venation_pipeline(reference_leaf, VenationConfig())
    golden = np.asarray(Image.open(GOLDEN))
    assert np.array_equal(out, golden)


def test_venation_config_validation():
    with pytest.raises(ConfigError):
        VenationConfig(4)
    with pytest.raises(ConfigError):
        VenationConfig(3, "manhattan")


def test_preprocess_directory_mirrors_tree(tmp_path, corpus):
    out = tmp_path / "out"
    stage = tmp_path / "stages"
    written = preprocess_directory(corpus, out, VenationConfig(), stage)
    assert len(written) == 16
    assert (out / "species_00" / "leaf_000.png").exists()
    stage_files = sorted(p.name for p in (stage / "species_00" / "leaf_000").iterdir())
    assert stage_files == ["0_rgb.png", "1_grayscale.png", "2_median.png", "3_sobel_x.png",
                           "4_sobel_y.png", "5_magnitude.png", "6_complement.png"]
    # bit-identical on a second pass
    first = hashlib.sha256((out / "species_01" / "leaf_003.png").read_bytes()).hexdigest()
    preprocess_directory(corpus, out, VenationConfig())
    assert hashlib.sha256((out / "species_01" / "leaf_003.png").read_bytes()).hexdigest() == first


# --- normalisation -----------------------------------------------------------

def test_unit_scale_endpoints():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = 255
    out = normalize_for_model(img, unit_scale())
    assert out.dtype == np.float32
    assert np.all(out[0, 0] == 1.0) and np.all(out[1, 1] == 0.0)


def test_channel_center_zero_mean_at_reference():
    rng = np.random.default_rng(6)
    # integer images whose expected channel values equal the reference means
    batch = np.empty((64, 32, 32, 3), dtype=np.uint8)
    for c, m in enumerate(CHANNEL_CENTER_MEANS):
        lo = int(np.floor(m))
        frac = m - lo
        batch[..., c] = lo + (rng.random(batch.shape[:3]) < frac)
    out = np.stack([normalize_for_model(im, channel_center()) for im in batch])
    assert np.all(np.abs(out.reshape(-1, 3).mean(axis=0)) < 1e-2)


def test_backbone_native_scheme():
    s = backbone_native("efficientnet_b0")
    assert s.scheme_id is Scheme.BACKBONE_NATIVE
    img = np.full((2, 2, 3), 255, dtype=np.uint8)
    out = normalize_for_model(img, s)
    expected = (1.0 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225])
    assert np.allclose(out[0, 0], expected, atol=1e-5)


def test_unknown_scheme_rejected():
    with pytest.raises(ConfigError):
        normalize_for_model(np.zeros((2, 2, 3), np.uint8), "UNIT_SCALE")
    with pytest.raises(ValueError):
        NormalizationScheme.from_dict({"scheme_id": "ZSCORE", "mean": [0] * 3, "scale": [1] * 3})
    with pytest.raises(ConfigError):
        backbone_native("vgg16")
