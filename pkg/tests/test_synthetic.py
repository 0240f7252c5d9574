import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxcrf.bench.synthetic import (
    BACKGROUND,
    CLASS_A,
    CLASS_B,
    CLASS_C,
    CLASS_D,
    SyntheticSpec,
    gen_dataset,
    load_dataset,
    middle_band,
    render_sample,
    sample_layout,
    write_dataset,
)

SMALL = SyntheticSpec(image_size=32, count=10, seed=3)


def test_same_seed_bit_identical():
    a, b = gen_dataset(SMALL), gen_dataset(SMALL)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    c = gen_dataset(SyntheticSpec(image_size=32, count=10, seed=4))
    assert not np.array_equal(a.train[0].image, c.train[0].image)


def test_split_is_eighty_twenty():
    ds = gen_dataset(SyntheticSpec(image_size=32, count=25))
    assert (len(ds.train), len(ds.test)) == (20, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([16, 32, 48, 64]))
def test_paired_middle_crops_identical(seed, size):
    img_a, mask_a, lay_a = render_sample(seed, CLASS_A, size)
    img_b, mask_b, lay_b = render_sample(seed, CLASS_B, size)
    assert lay_a == lay_b
    rows, cols = middle_band(lay_a, size)
    assert np.array_equal(img_a[rows, cols], img_b[rows, cols])
    assert np.all(mask_a[rows, cols] == CLASS_A) and np.all(mask_b[rows, cols] == CLASS_B)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([CLASS_A, CLASS_B]))
def test_context_pairing(seed, cls):
    _, mask, lay = render_sample(seed, cls, 48)
    rows, cols = middle_band(lay, 48)
    below = mask[rows.stop, cols.start]
    above = mask[rows.start - 1, cols.start]
    assert below == (CLASS_C if cls == CLASS_A else CLASS_D)
    assert {above, below} == {CLASS_C, CLASS_D}
    assert mask.max() < 5
    assert np.all(mask[:, : lay["left"]] == BACKGROUND)


def test_layout_bounds_and_flip_symmetry():
    rng = np.random.default_rng(0)
    lays = [sample_layout(64, rng) for _ in range(4000)]
    for lay in lays:
        assert 13 <= lay["left"] <= 16 and 13 <= lay["right"] <= 16
        assert 13 <= lay["cap"] <= 20 and 13 <= lay["base"] <= 20
    cap = np.bincount([l["cap"] for l in lays], minlength=21)
    base = np.bincount([l["base"] for l in lays], minlength=21)
    assert np.abs(cap - base).max() < 0.05 * len(lays)


def test_count_below_five_rejected():
    with pytest.raises(ValueError, match="count"):
        gen_dataset(SyntheticSpec(count=4))


def test_middle_class_must_be_ambiguous():
    with pytest.raises(ValueError, match="middle_class"):
        render_sample(0, CLASS_C)


def test_noise_free_rendering_is_clean():
    img, mask, _ = render_sample(1, CLASS_A, 32, noise_sigma=0.0)
    assert img.dtype == np.uint8 and img.shape == (32, 32, 3)


def test_write_load_round_trip(tmp_path):
    manifest = write_dataset(SMALL, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 10 and lines[0] == "images/00000.ppm masks/00000.pgm train"
    assert lines[-1].endswith(" test")
    back = load_dataset(tmp_path)
    ref = gen_dataset(SMALL)
    for x, y in zip(back.train + back.test, ref.train + ref.test):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
