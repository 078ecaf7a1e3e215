import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfdaseg.evaluation import evaluate, threshold_segmenter
from gfdaseg.synthdata import (
    IDENTITY,
    AugmentRecord,
    ImageFormatError,
    LabelWithheldError,
    apply_record,
    augment,
    generate,
    read_dataset,
    read_image,
    read_mask,
    split_target,
    write_dataset,
    write_image,
    write_mask,
)


@pytest.fixture(scope="module")
def small():
    return generate(7, 8, 8, size=32)


def test_generate_counts_and_masks(small):
    samples = small.S + small.target_train
    assert len(samples) == 16
    assert [s.domain for s in samples].count("source") == 8
    assert all(s.eval_mask.any() for s in samples + small.test_T + small.test_S)
    assert all(s.image.shape == (32, 32, 1) for s in samples)
    assert all(set(np.unique(s.eval_mask)) <= {0, 1} for s in samples)


def test_generate_is_deterministic(small):
    again = generate(7, 8, 8, size=32)
    for a, b in zip(small.S + small.T2 + small.test_T, again.S + again.T2 + again.test_T):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.eval_mask, b.eval_mask)


def test_threaded_generation_matches_serial():
    a, b = generate(3, 6, 6, size=32), generate(3, 6, 6, size=32, workers=4)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.all_train(), b.all_train()))


def test_source_brighter_than_target():
    split = generate(0, 16, 16, size=64)
    src = np.mean([s.image.mean() for s in split.S])
    tgt = np.mean([s.image.mean() for s in split.target_train])
    assert src - tgt >= 0.2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_threshold_segmenter_exposes_domain_gap(seed):
    split = generate(seed, 20, 20, size=64)
    _, predict = threshold_segmenter(split.S)
    gap = evaluate(predict, split.test_S).dsc_mean - evaluate(predict, split.test_T).dsc_mean
    assert gap >= 0.15


@pytest.mark.parametrize("kwargs", [dict(n_source=3, n_target=8), dict(n_source=8, n_target=2),
                                    dict(n_source=8, n_target=8, size=48)])
def test_generate_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        generate(0, **kwargs)


def test_unlabeled_target_withholds_masks(small):
    assert small.T1 == [] and len(small.T2) == 8
    with pytest.raises(LabelWithheldError):
        small.T2[0].mask
    assert small.T2[0].eval_mask.shape == (32, 32)


def test_split_fraction_and_count():
    T = generate(1, 4, 10, size=32).T2
    T1, T2 = split_target(T, 0.5, seed=1)
    assert len(T1) == 5 and len(T2) == 5
    T1, T2 = split_target(T, 1, seed=1)
    assert len(T1) == 1 and len(T2) == 9
    assert all(s.labeled for s in T1) and not any(s.labeled for s in T2)


def test_split_fraction_tenth_of_twenty_is_disjoint():
    T = generate(2, 4, 20, size=32).T2
    T1, T2 = split_target(T, 0.1, seed=5)
    assert len(T1) == 2 and len(T2) == 18
    assert not {s.id for s in T1} & {s.id for s in T2}
    assert {s.id for s in T1} | {s.id for s in T2} == {s.id for s in T}


@pytest.mark.parametrize("labeled", [0, 10, 11, 0.01])
def test_split_rejects_empty_side(labeled):
    T = generate(2, 4, 10, size=32).T2
    with pytest.raises(ValueError):
        split_target(T, labeled)


def test_identity_augment_and_double_half_turn(rng):
    img = rng.uniform(size=(16, 16, 1))
    assert np.array_equal(apply_record(img, IDENTITY), img)
    half = AugmentRecord(2, 0, 0)
    assert np.array_equal(apply_record(apply_record(img, half), half), img)


def test_impulse_lands_at_transformed_coordinate():
    size = 32
    img = np.zeros((size, size))
    img[5, 9] = 1.0
    out, mask, rec = augment(img, img.astype(np.int64), seed=123)
    r, c = np.argwhere(out == 1.0)[0]
    # one counter-clockwise quarter turn sends (r, c) to (size-1-c, r)
    y, x = 5, 9
    for _ in range(rec.quarter_turns):
        y, x = size - 1 - x, y
    assert (r, c) == (y + rec.dy, x + rec.dx)
    assert np.array_equal(mask, out.astype(np.int64))
    assert np.allclose(rec.inverse_coords(np.array([r, c], float), size), [5, 9])


@given(st.integers(0, 3), st.integers(-4, 4), st.integers(-4, 4),
       st.tuples(st.integers(0, 31), st.integers(0, 31)))
def test_coordinate_maps_are_inverse(turns, dy, dx, point):
    rec = AugmentRecord(turns, dy, dx)
    p = np.array(point, dtype=float)
    assert np.array_equal(rec.inverse_coords(rec.forward_coords(p, 32), 32), p)


def test_augment_limits(rng):
    for seed in range(50):
        _, _, rec = augment(np.zeros((64, 64)), None, seed)
        assert rec.rotation in (0, 90, 180, 270)
        assert abs(rec.dy) <= 8 and abs(rec.dx) <= 8


def test_image_round_trip(tmp_path, rng):
    img = rng.uniform(size=(8, 16, 1))
    write_image(tmp_path / "a.pgm", img)
    assert np.max(np.abs(read_image(tmp_path / "a.pgm") - img)) <= 1 / 65535
    rgb = rng.uniform(size=(4, 4, 3))
    write_image(tmp_path / "b.ppm", rgb)
    assert np.max(np.abs(read_image(tmp_path / "b.ppm") - rgb)) <= 1 / 65535


def test_mask_round_trip(tmp_path):
    m = np.array([[0, 1], [1, 0]])
    write_mask(tmp_path / "m.pgm", m)
    assert (tmp_path / "m.pgm").read_bytes().endswith(bytes([0, 255, 255, 0]))
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), m)


def test_hand_written_pgm_fixture(tmp_path):
    path = tmp_path / "f.pgm"
    path.write_bytes(b"P5\n# fixture\n2 2\n65535\n" + bytes([0, 0, 0xFF, 0xFF, 0x80, 0x00, 0x00, 0x01]))
    img = read_image(path)
    assert img[:, :, 0].tolist() == [[0.0, 1.0], [32768 / 65535, 1 / 65535]]


@pytest.mark.parametrize("blob,fragment", [
    (b"", "empty"),
    (b"P3\n2 2\n255\n", "magic"),
    (b"P5\n2 x\n255\n", "header"),
    (b"P5\n2 2\n255\n\x00\x01", "truncated"),
])
def test_malformed_files(tmp_path, blob, fragment):
    path = tmp_path / "bad.pgm"
    path.write_bytes(blob)
    with pytest.raises(ImageFormatError) as info:
        read_image(path)
    assert fragment in str(info.value) and "byte" in str(info.value)


def test_dataset_manifest_round_trip(tmp_path):
    split = generate(4, 4, 6, size=32, labeled=2)
    manifest = write_dataset(split, tmp_path / "ds")
    data = json.loads(manifest.read_text())
    assert data["generator"]["seed"] == 4
    back = read_dataset(manifest)
    assert [len(back.S), len(back.T1), len(back.T2)] == [4, 2, 4]
    assert not any(s.labeled for s in back.T2)
    assert np.max(np.abs(back.S[0].image - split.S[0].image)) <= 1 / 65535
    assert np.array_equal(back.T2[1].eval_mask, split.T2[1].eval_mask)


def test_manifest_bytes_are_reproducible(tmp_path):
    a = write_dataset(generate(9, 4, 4, size=32, labeled=1), tmp_path / "a").read_bytes()
    b = write_dataset(generate(9, 4, 4, size=32, labeled=1), tmp_path / "b").read_bytes()
    assert a == b
