import numpy as np
import pytest

from flextrees.dataio import (DataError, Dataset, Stats, fit_stats, load_csv, split, split_sizes, standardize,
                              write_csv)


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_missing_response_sets_mask(tmp_path):
    data = load_csv(write(tmp_path, "a,b,y\n1,2,3\n4,5,\n7,8,9\n"), ["y"])
    assert data.mask[:, 0].tolist() == [True, False, True]
    assert data.feature_names == ["a", "b"] and data.task_names == ["y"]
    assert np.isnan(data.responses[1, 0])


def test_header_only(tmp_path):
    data = load_csv(write(tmp_path, "a,b,y\n"), ["y"])
    assert data.num_rows == 0 and data.features.shape == (0, 2)


def test_round_trip(tmp_path, rng):
    Y = rng.normal(size=(25, 2))
    mask = rng.random((25, 2)) < 0.7
    Y[~mask] = np.nan
    data = Dataset(rng.normal(size=(25, 3)), Y, mask, ["f0", "f1", "f2"], ["t0", "t1"])
    path = tmp_path / "rt.csv"
    write_csv(data, path)
    back = load_csv(path, ["t0", "t1"])
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.mask, data.mask)
    assert np.array_equal(back.responses, data.responses, equal_nan=True)


def test_bad_files(tmp_path):
    with pytest.raises(DataError, match="row 3"):
        load_csv(write(tmp_path, "a,y\n1,2\nx,3\n"), ["y"])
    with pytest.raises(DataError, match="row 2"):
        load_csv(write(tmp_path, "a,y\n1,2,3\n"), ["y"])
    with pytest.raises(DataError, match="unknown task"):
        load_csv(write(tmp_path, "a,y\n1,2\n"), ["z"])
    with pytest.raises(DataError, match="missing feature"):
        load_csv(write(tmp_path, "a,y\n,2\n"), ["y"])
    with pytest.raises(DataError):
        load_csv(write(tmp_path, ""), ["y"])


def test_delimiter(tmp_path):
    data = load_csv(write(tmp_path, "a;y\n1.5;2\n"), "y", delimiter=";")
    assert data.features.tolist() == [[1.5]] and data.responses.tolist() == [[2.0]]


def test_split_sizes():
    assert split_sizes(100) == (64, 16, 20)
    assert split_sizes(5) == (3, 1, 1)
    assert split(100, 1).counts() == {"train": 64, "valid": 16, "test": 20}
    with pytest.raises(DataError):
        split(4, 0)


def test_split_is_deterministic_partition():
    a, b = split(237, 8), split(237, 8)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, split(237, 9).labels)
    rows = np.concatenate([a.rows(s) for s in ("train", "valid", "test")])
    assert sorted(rows.tolist()) == list(range(237))


def test_standardize_uses_train_rows(rng):
    X = rng.normal(3.0, 2.0, size=(200, 3))
    X[:, 2] = 5.0
    data = Dataset(X, rng.poisson(2, size=200).astype(float), None)
    assignment = split(data, 0)
    out = standardize(data, assignment)
    train = out.features[assignment.rows("train")]
    np.testing.assert_allclose(train[:, :2].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(train[:, :2].std(axis=0), 1.0, atol=1e-12)
    assert not out.features[:, 2].any() and out.stats.feature_sd[2] == 1.0
    assert abs(out.features[assignment.rows("test"), 0].mean()) > 1e-6
    assert np.array_equal(out.responses, data.responses)  # counts are left alone
    stats = fit_stats(data, assignment.rows("train"))
    np.testing.assert_array_equal(stats.transform_features(X), out.features)


def test_response_scaling_inverts(rng):
    Y = rng.normal(10, 4, size=(50, 2))
    data = Dataset(rng.normal(size=(50, 2)), Y, None)
    out = standardize(data, scale_responses=True)
    assert out.responses.min() == 0.0 and out.responses.max() == 1.0
    np.testing.assert_allclose(out.stats.inverse_responses(out.responses), Y, atol=1e-12)


def test_stats_dict_round_trip(rng):
    stats = Stats(rng.normal(size=3), rng.uniform(1, 2, size=3), np.array([1.0]), np.array([2.0]))
    back = Stats.from_dict(stats.to_dict())
    assert np.array_equal(back.feature_sd, stats.feature_sd)
    assert np.array_equal(back.response_range, stats.response_range)


def test_shape_mismatch():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros((4, 1)), None)
