import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidattack.data import (DatasetBundle, NamingScheme, PersonSample, SyntheticSpec,
                             bundle_fingerprint, export_directory_dataset, filter_junk,
                             generate_synthetic, load_directory_dataset, save_png,
                             validate_bundle)
from reidattack.exceptions import ConfigError, DatasetError


def _sample(sid, pid, cam, split, value=0.5, shape=(16, 8)):
    return PersonSample(sid, pid, cam, split, np.full((3,) + shape, value))


def test_filter_junk_examples():
    samples = [_sample(f"s{i}", pid, 1, "train") for i, pid in enumerate([5, -1, 5, 0])]
    kept = filter_junk(samples, {-1, 0})
    assert [s.sample_id for s in kept] == ["s0", "s2"]
    assert filter_junk(samples, set()) == samples


@given(st.lists(st.integers(-2, 6), max_size=60), st.sets(st.integers(-2, 6), max_size=4))
@settings(max_examples=50, deadline=None)
def test_filter_junk_matches_count_oracle(ids, junk):
    samples = [_sample(f"s{i}", pid, 1, "train") for i, pid in enumerate(ids)]
    kept = filter_junk(samples, junk)
    assert len(kept) == sum(1 for pid in ids if pid not in junk)
    assert [s.sample_id for s in kept] == [s.sample_id for s in samples if s.person_id not in junk]


def test_filter_junk_thousand_random(rng):
    ids = rng.integers(-1, 10, size=1000)
    samples = [_sample(f"s{i}", int(p), 1, "train", shape=(16, 8)) for i, p in enumerate(ids)]
    assert len(filter_junk(samples, {-1, 0})) == int(np.sum((ids != -1) & (ids != 0)))


def test_synthetic_is_deterministic_and_valid(bundle):
    again = generate_synthetic(SyntheticSpec(seed=7))
    assert again == bundle
    assert bundle_fingerprint(again) == bundle_fingerprint(bundle)
    assert validate_bundle(bundle) == []
    assert bundle.num_train_ids == 8
    assert len(bundle.train) == 64
    assert bundle.images("query").shape[1:] == (3, 64, 32)


def test_synthetic_seed_changes_content():
    a = generate_synthetic(SyntheticSpec(num_train_ids=2, num_test_ids=2, seed=1))
    b = generate_synthetic(SyntheticSpec(num_train_ids=2, num_test_ids=2, seed=2))
    assert bundle_fingerprint(a) != bundle_fingerprint(b)


def test_synthetic_query_has_cross_camera_match(bundle):
    gallery = {(s.person_id, s.camera_id) for s in bundle.gallery}
    for q in bundle.query:
        assert any(pid == q.person_id and cam != q.camera_id for pid, cam in gallery)
    assert not {s.person_id for s in bundle.train} & {s.person_id for s in bundle.query}


def test_synthetic_rejects_tiny_images():
    with pytest.raises(ConfigError, match="too small"):
        generate_synthetic(SyntheticSpec(image_shape=(12, 8)))


@pytest.mark.parametrize("field,value", [("num_cameras", 1), ("num_train_ids", 0),
                                         ("images_per_id", 0)])
def test_synthetic_spec_invariants(field, value):
    with pytest.raises(ConfigError):
        SyntheticSpec(**{field: value})


def test_images_are_read_only(bundle):
    with pytest.raises(ValueError):
        bundle.train[0].image[0, 0, 0] = 1.0


def _same_content(a, b):
    """Loader order follows file names; compare split by split keyed on sample id."""
    assert (a.image_shape, a.num_train_ids) == (b.image_shape, b.num_train_ids)
    for split in ("train", "query", "gallery"):
        left = {s.sample_id: s for s in getattr(a, split)}
        right = {s.sample_id: s for s in getattr(b, split)}
        assert left.keys() == right.keys()
        for sid, s in left.items():
            assert s == right[sid]
            np.testing.assert_array_equal(s.image, right[sid].image)


def test_directory_roundtrip(tmp_path):
    spec = SyntheticSpec(num_train_ids=2, num_test_ids=2, images_per_id=4, seed=11)
    original = generate_synthetic(spec)
    export_directory_dataset(original, tmp_path)
    _same_content(load_directory_dataset(tmp_path), original)


def test_directory_roundtrip_64_files(tmp_path):
    original = generate_synthetic(SyntheticSpec(num_train_ids=4, num_test_ids=4, images_per_id=8,
                                                seed=5))
    export_directory_dataset(original, tmp_path)
    assert sum(1 for _ in tmp_path.rglob("*.png")) == 64
    _same_content(load_directory_dataset(tmp_path), original)


def _write(root, split_dir, name, shape=(16, 8)):
    d = root / split_dir
    d.mkdir(parents=True, exist_ok=True)
    save_png(np.full((3,) + shape, 0.5), d / name)


def test_load_worked_example(tmp_path):
    _write(tmp_path, "bounding_box_test", "0001_c1_00.png")
    _write(tmp_path, "bounding_box_test", "0001_c2_00.png")
    _write(tmp_path, "query", "0001_c1_01.png")
    _write(tmp_path, "bounding_box_train", "0042_c1_00.png")
    _write(tmp_path, "bounding_box_train", "0042_c2_00.png")
    b = load_directory_dataset(tmp_path, NamingScheme.MARKET1501)
    assert (b.num_train_ids, len(b.query), len(b.gallery)) == (1, 1, 2)
    assert b.query[0].person_id == 1 and b.query[0].camera_id == 1


def test_load_missing_match_is_invariant_error(tmp_path):
    _write(tmp_path, "bounding_box_test", "0001_c1_00.png")
    _write(tmp_path, "bounding_box_test", "0001_c2_00.png")
    _write(tmp_path, "query", "0007_c1_01.png")
    _write(tmp_path, "bounding_box_train", "0042_c1_00.png")
    with pytest.raises(DatasetError, match="cross_camera_match"):
        load_directory_dataset(tmp_path)


def test_load_missing_directory(tmp_path):
    (tmp_path / "query").mkdir()
    with pytest.raises(DatasetError, match="bounding_box"):
        load_directory_dataset(tmp_path)


def test_load_unparseable_name(tmp_path):
    _write(tmp_path, "bounding_box_train", "garbage.png")
    (tmp_path / "query").mkdir()
    (tmp_path / "bounding_box_test").mkdir()
    with pytest.raises(DatasetError, match="garbage.png"):
        load_directory_dataset(tmp_path)


def test_junk_filtered_on_load(tmp_path):
    _write(tmp_path, "bounding_box_test", "0001_c1_00.png")
    _write(tmp_path, "bounding_box_test", "0001_c2_00.png")
    _write(tmp_path, "bounding_box_test", "-1_c2_00.png")
    _write(tmp_path, "bounding_box_test", "0000_c2_00.png")
    _write(tmp_path, "query", "0001_c1_01.png")
    _write(tmp_path, "bounding_box_train", "0042_c1_00.png")
    b = load_directory_dataset(tmp_path)
    assert len(b.gallery) == 2


def test_validate_reports_overlap_and_count():
    s = [_sample("a", 1, 1, "train"), _sample("q", 1, 1, "query"), _sample("g", 1, 2, "gallery")]
    b = DatasetBundle(train=s[:1], query=s[1:2], gallery=s[2:], image_shape=(16, 8),
                      num_train_ids=3)
    kinds = {v.invariant for v in validate_bundle(b)}
    assert {"train_test_disjoint", "num_train_ids"} <= kinds
