import numpy as np
import pytest

from certshift import datagen as dg


@pytest.fixture(scope="module")
def bench():
    return dg.generate_benchmark(1, per_domain=120, image_size=32)


# ---------------------------------------------------------------------------
# generation


def test_same_seed_bitwise_identical(bench):
    again = dg.generate_benchmark(1, per_domain=120, image_size=32)
    for a, b in zip(list(bench.sources) + [bench.target], list(again.sources) + [again.target]):
        assert a.name == b.name
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
    for a, b in zip(bench.source_val, again.source_val):
        assert np.array_equal(a, b)


def test_different_seed_differs():
    a = dg.generate_benchmark(1, per_domain=40, image_size=16)
    b = dg.generate_benchmark(2, per_domain=40, image_size=16)
    assert not np.array_equal(a.sources[0].images, b.sources[0].images)


def test_every_class_domain_cell_populated(bench):
    floor = 120 // bench.class_count
    for domain in list(bench.sources) + [bench.target]:
        counts = np.bincount(domain.labels, minlength=bench.class_count)
        assert counts.min() >= floor


def test_label_balance_within_one(bench):
    for domain in list(bench.sources) + [bench.target]:
        counts = np.bincount(domain.labels, minlength=bench.class_count)
        assert counts.max() - counts.min() <= 1


def test_pixels_in_unit_interval(bench):
    for domain in list(bench.sources) + [bench.target]:
        assert domain.images.min() >= 0.0
        assert domain.images.max() <= 1.0


def test_domain_separation_regression_fixture(bench):
    # frozen statistics of the seed-1 benchmark; order photo, inverted,
    # textured, sketch (sources then target)
    expected = np.array(
        [
            [0.0, 0.2243193539, 0.0971171785, 0.5202606027],
            [0.2243193539, 0.0, 0.3207440757, 0.3732473226],
            [0.0971171785, 0.0, 0.0, 0.6166853244],
            [0.5202606027, 0.3732473226, 0.6166853244, 0.0],
        ]
    )
    expected[2, 1] = 0.3207440757
    sep = dg.domain_mean_separation(bench)
    np.testing.assert_allclose(sep, expected, rtol=0, atol=1e-9)
    off_diag = sep[~np.eye(4, dtype=bool)]
    assert off_diag.min() > 0.05


def test_preconditions_rejected():
    with pytest.raises(ValueError, match="per_domain"):
        dg.generate_benchmark(1, per_domain=30, image_size=32)
    with pytest.raises(ValueError, match="image_size"):
        dg.generate_benchmark(1, per_domain=100, image_size=8)
    with pytest.raises(ValueError, match="shape registry"):
        dg.generate_benchmark(1, per_domain=100, image_size=32, class_count=5)
    with pytest.raises(ValueError, match="unknown target"):
        dg.generate_benchmark(1, per_domain=100, image_size=32, target_domain="oil")


def test_watermarks_are_class_keyed_content(bench):
    marks = dg.class_watermarks(1, 4, 32)
    assert marks.shape == (4, 3, 32, 32)
    assert np.abs(marks).max() == pytest.approx(dg.WATERMARK_AMP)
    # identical motif in every domain for a given class: remove style means
    assert not np.array_equal(marks[0], marks[1])


# ---------------------------------------------------------------------------
# splits


def test_split_sizes_and_class_balance(bench):
    train_idx, val_idx = dg.split_train_val(bench, 0.2)
    for domain, vi in zip(bench.sources, val_idx):
        assert len(vi) == 24  # 0.2 * 120
        counts = np.bincount(domain.labels[vi], minlength=4)
        assert counts.max() - counts.min() <= 1


def test_split_partition_disjoint_and_complete(bench):
    train_idx, val_idx = dg.split_train_val(bench, 0.2)
    for domain, ti, vi in zip(bench.sources, train_idx, val_idx):
        union = np.concatenate([ti, vi])
        assert len(np.unique(union)) == len(union) == len(domain.labels)


def test_split_never_touches_target(bench):
    train_idx, val_idx = dg.split_train_val(bench, 0.2)
    assert len(train_idx) == len(bench.sources)
    assert len(val_idx) == len(bench.sources)


def test_split_fraction_bounds(bench):
    for bad in (0.0, 0.5, -0.1, 0.9):
        with pytest.raises(ValueError, match="val_fraction"):
            dg.split_train_val(bench, bad)


def test_split_deterministic(bench):
    a = dg.split_train_val(bench, 0.25)
    b = dg.split_train_val(bench, 0.25)
    for x, y in zip(a[1], b[1]):
        assert np.array_equal(x, y)


def test_source_arrays_concatenate(bench):
    xs, ys = dg.source_arrays(bench, "train")
    xv, yv = dg.source_arrays(bench, "val")
    assert xs.shape[0] + xv.shape[0] == 3 * 120
    with pytest.raises(ValueError):
        dg.source_arrays(bench, "test")


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip_bitwise(bench, tmp_path):
    dg.save_benchmark(bench, tmp_path / "bench")
    loaded = dg.load_benchmark(tmp_path / "bench")
    assert loaded.domain_names == bench.domain_names
    assert loaded.class_names == bench.class_names
    for a, b in zip(list(bench.sources) + [bench.target], list(loaded.sources) + [loaded.target]):
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
    for a, b in zip(bench.source_val, loaded.source_val):
        assert np.array_equal(a, b)


def test_load_truncated_blob_fails(bench, tmp_path):
    root = tmp_path / "bench"
    dg.save_benchmark(bench, root)
    blob = root / "photo.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="photo"):
        dg.load_benchmark(root)


def test_load_manifest_size_mismatch_fails(bench, tmp_path):
    import json

    root = tmp_path / "bench"
    dg.save_benchmark(bench, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["domains"][0]["blob_bytes"] -= 8
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="blob_bytes"):
        dg.load_benchmark(root)


def test_load_missing_manifest_field_named(bench, tmp_path):
    import json

    root = tmp_path / "bench"
    dg.save_benchmark(bench, root)
    manifest = json.loads((root / "manifest.json").read_text())
    del manifest["class_count"]
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="class_count"):
        dg.load_benchmark(root)


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        dg.load_benchmark(tmp_path / "nope")


# ---------------------------------------------------------------------------
# separability and shift (linear probe oracle)


def test_linear_probe_in_domain_vs_most_dissimilar(bench):
    from sklearn.linear_model import LogisticRegression

    photo = next(d for d in bench.sources if d.name == "photo")
    clf = LogisticRegression(max_iter=3000).fit(
        photo.images.reshape(len(photo.labels), -1), photo.labels
    )
    in_domain = clf.score(photo.images.reshape(len(photo.labels), -1), photo.labels)
    assert in_domain >= 0.90
    sep = dg.domain_mean_separation(bench)
    domains = list(bench.sources) + [bench.target]
    photo_idx = next(i for i, d in enumerate(domains) if d.name == "photo")
    far_idx = int(np.argmax(sep[photo_idx]))
    far = domains[far_idx]
    far_acc = clf.score(far.images.reshape(len(far.labels), -1), far.labels)
    assert far_acc <= in_domain - 0.02
