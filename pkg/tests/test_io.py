import json

import numpy as np
import pytest

from conftest import random_gaussian
from sosgmm.errors import ConfigError, MissingInput
from sosgmm.gaussians import GaussianParams, MixtureModel, SampleSet, corrupt, sample_mixture
from sosgmm.io import read_gaussian, read_json, read_mixture, read_samples, sidecar_path, write_json, write_samples


@pytest.mark.parametrize("corrupted", [False, True])
def test_samples_roundtrip_bitwise(tmp_path, corrupted):
    rng = np.random.default_rng(0)
    m = MixtureModel.uniform([random_gaussian(rng, 3, 5.0) for _ in range(2)])
    s = sample_mixture(m, 58, 4)
    if corrupted:
        s = corrupt(s, 0.1, "random-noise", seed=2)
    p = write_samples(s, tmp_path / "s.csv")
    back = read_samples(p)
    assert back == s
    assert np.array_equal(back.points, s.points)
    meta = read_json(sidecar_path(p))
    assert meta["schema"] == 1 and meta["n"] == 58


def test_unlabelled_points(tmp_path):
    s = SampleSet(np.array([[0.1, 1e-300], [np.pi, -2.5e17]]))
    back = read_samples(write_samples(s, tmp_path / "u.csv"))
    assert back.labels is None and back.corrupted is None
    assert np.array_equal(back.points, s.points)


def test_mixture_and_gaussian_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    m = MixtureModel(tuple(random_gaussian(rng, 2, 3.0) for _ in range(3)), np.array([0.2, 0.3, 0.5]))
    write_json(m.to_dict(), tmp_path / "m.json")
    assert read_mixture(tmp_path / "m.json") == m
    g = m.components[0]
    write_json(g.to_dict(), tmp_path / "g.json")
    assert read_gaussian(tmp_path / "g.json") == g


def test_flat_covariance_accepted(tmp_path):
    (tmp_path / "g.json").write_text(json.dumps({"mean": [0, 0], "covariance": [2, 0, 0, 3]}))
    g = read_gaussian(tmp_path / "g.json")
    np.testing.assert_array_equal(g.covariance, np.diag([2.0, 3.0]))


def test_schema_tag_and_numpy_values(tmp_path):
    write_json({"a": np.float64(0.1), "b": np.arange(3), "c": np.bool_(True)}, tmp_path / "x.json")
    doc = read_json(tmp_path / "x.json")
    assert doc == {"schema": 1, "a": 0.1, "b": [0, 1, 2], "c": True}


def test_missing_and_invalid(tmp_path):
    with pytest.raises(MissingInput):
        read_samples(tmp_path / "nope.csv")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        read_json(tmp_path / "bad.json")
