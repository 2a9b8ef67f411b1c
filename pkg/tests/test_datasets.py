"""Sampler statistics, concentration bounds, determinism, and CSV round trips."""

import numpy as np
import pytest

from sjko import datasets as ds
from sjko.rng import StreamRng


def test_standard_gaussian_moments():
    n = 100_000
    cloud = ds.sample_standard_gaussian(3, n, StreamRng(0))
    assert cloud.points.shape == (n, 3)
    assert np.all(np.abs(cloud.points.mean(axis=0)) <= 4.0 / np.sqrt(n))
    cov = np.cov(cloud.points, rowvar=False)
    assert np.all(np.abs(np.diag(cov) - 1.0) <= 0.05)
    off = cov - np.diag(np.diag(cov))
    assert np.all(np.abs(off) <= 0.05)


def test_standard_gaussian_same_seed_identical():
    a = ds.sample_standard_gaussian(2, 100, StreamRng(5))
    b = ds.sample_standard_gaussian(2, 100, StreamRng(5))
    assert np.array_equal(a.points, b.points)


def test_rng_streams_are_independent():
    base = StreamRng(7)
    a = base.derive(1).normals(1000)
    b = base.derive(2).normals(1000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


class TestTwoCircles:
    def test_every_point_near_a_ring(self):
        cloud = ds.sample_two_circles(10_000, StreamRng(1))
        r = np.linalg.norm(cloud.points, axis=1)
        gap = np.minimum(np.abs(r - 4.0), np.abs(r - 8.0))
        # radial displacement <= ||0.2 z||, and P(||0.2 z|| > 1.2) ~ 1e-8 per point
        assert np.max(gap) <= 1.2

    def test_equal_mass_between_rings(self):
        cloud = ds.sample_two_circles(10_000, StreamRng(2))
        r = np.linalg.norm(cloud.points, axis=1)
        inner = np.mean(np.abs(r - 4.0) < np.abs(r - 8.0))
        assert abs(inner - 0.5) <= 0.02

    def test_mean_near_origin(self):
        cloud = ds.sample_two_circles(100_000, StreamRng(3))
        assert np.all(np.abs(cloud.points.mean(axis=0)) <= 0.1)

    def test_radial_histogram_has_two_modes(self):
        cloud = ds.sample_two_circles(100_000, StreamRng(4))
        r = np.linalg.norm(cloud.points, axis=1)
        hist, edges = np.histogram(r, bins=np.arange(0.0, 10.0, 0.25))
        occupied = np.flatnonzero(hist > 500)
        centers = 0.5 * (edges[occupied] + edges[occupied + 1])
        # the populated bins split into one cluster around 4 and one around 8
        assert np.all((np.abs(centers - 4.0) < 1.0) | (np.abs(centers - 8.0) < 1.0))
        assert np.any(np.abs(centers - 4.0) < 1.0)
        assert np.any(np.abs(centers - 8.0) < 1.0)


class TestGmm25:
    def test_centers_are_exact_grid(self):
        expected = sorted((3.0 * i, 3.0 * j) for i in range(-2, 3) for j in range(-2, 3))
        actual = sorted(map(tuple, ds.GMM25_CENTERS))
        assert actual == expected

    def test_every_point_close_to_a_center(self):
        cloud = ds.sample_gmm25(10_000, StreamRng(5))
        d2 = np.sum((cloud.points[:, None, :] - ds.GMM25_CENTERS[None]) ** 2, axis=2)
        assert np.max(np.sqrt(d2.min(axis=1))) <= 0.05  # 10 sigma of the 0.005 noise

    def test_multinomial_concentration(self):
        n = 25_000
        cloud = ds.sample_gmm25(n, StreamRng(6))
        d2 = np.sum((cloud.points[:, None, :] - ds.GMM25_CENTERS[None]) ** 2, axis=2)
        counts = np.bincount(d2.argmin(axis=1), minlength=25)
        expected = n / 25
        slack = 4.0 * np.sqrt(n * (1 / 25) * (24 / 25))
        assert np.all(np.abs(counts - expected) <= slack)

    def test_all_centers_touched(self):
        cloud = ds.sample_gmm25(100_000, StreamRng(7))
        d2 = np.sum((cloud.points[:, None, :] - ds.GMM25_CENTERS[None]) ** 2, axis=2)
        assert len(np.unique(d2.argmin(axis=1))) == 25


def test_gaussian_sampler_matches_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    cloud = ds.sample_gaussian(mean, cov, 200_000, StreamRng(8))
    np.testing.assert_allclose(cloud.points.mean(axis=0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(cloud.points, rowvar=False), cov, atol=0.05)


def test_cloud_validation():
    with pytest.raises(ValueError):
        ds.ParticleCloud(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ds.ParticleCloud(np.array([[np.inf, 0.0]]))


def test_cloud_csv_roundtrip(tmp_path):
    cloud = ds.sample_two_circles(50, StreamRng(9))
    path = tmp_path / "cloud.csv"
    cloud.save_csv(path)
    back = ds.load_cloud_csv(path)
    assert np.array_equal(back.points, cloud.points)
    text = path.read_text().splitlines()
    assert text[0] == "x0,x1"
    assert len(text) == 51


def test_load_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        ds.load_cloud_csv(path)


def test_load_csv_rejects_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ValueError):
        ds.load_cloud_csv(path)


def test_sampler_object_advances_state():
    sampler = ds.Sampler(ds.SamplerSpec(kind="gmm25"), seed=11)
    a = sampler.draw(100)
    b = sampler.draw(100)
    assert not np.array_equal(a, b)
    again = ds.Sampler(ds.SamplerSpec(kind="gmm25"), seed=11)
    assert np.array_equal(again.draw(100), a)
