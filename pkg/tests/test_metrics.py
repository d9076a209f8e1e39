import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvhtok.bvh_io import axis_rotation
from bvhtok.metrics import (
    FeatureSet,
    fid,
    geodesic_distance,
    mean_geodesic_degrees,
    motion_features,
    mpjpe,
    mpjpe_no_translation,
    r_precision,
)
from conftest import random_rotations


def loop_mpjpe(pred, gt):
    total, n = 0.0, 0
    for t in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += math.sqrt(sum((pred[t, j, k] - gt[t, j, k]) ** 2 for k in range(3)))
            n += 1
    return total / n


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(5, 4, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(np.tile([1.0, 0, 0], (5, 4, 1)), np.zeros((5, 4, 3))) == 1.0
    pred = rng.normal(size=(5, 4, 3))
    assert abs(mpjpe(pred, gt) - loop_mpjpe(pred, gt)) <= 1e-12
    with pytest.raises(ValueError):
        mpjpe(pred, gt[:, :3])


def test_mpjpe_no_translation(rng):
    gt = rng.normal(size=(6, 5, 3))
    assert mpjpe_no_translation(gt + [3.0, -1.0, 2.0], gt) <= 1e-12
    assert mpjpe_no_translation(gt, gt) == 0.0
    pred = rng.normal(size=(6, 5, 3))
    want = loop_mpjpe(pred - pred[:, :1], gt - gt[:, :1])
    assert abs(mpjpe_no_translation(pred, gt) - want) <= 1e-12


def test_geodesic_examples():
    eye = np.eye(3)
    assert geodesic_distance(eye, eye) == 0.0
    assert abs(geodesic_distance(eye, axis_rotation("X", np.pi)) - np.pi) <= 1e-9
    assert abs(geodesic_distance(eye, axis_rotation("Z", np.pi / 2)) - np.pi / 2) <= 1e-9
    assert mean_geodesic_degrees(eye[None], axis_rotation("Y", np.pi / 3)[None]) == pytest.approx(60)
    with pytest.raises(ValueError):
        geodesic_distance(eye, 2 * eye)


def test_geodesic_symmetric_and_bounded(rng):
    a = random_rotations(rng, (100,))
    b = random_rotations(rng, (100,))
    d = geodesic_distance(a, b)
    assert np.all((d >= 0) & (d <= np.pi))
    assert np.allclose(d, geodesic_distance(b, a), atol=1e-12)
    rel = np.swapaxes(a, -1, -2) @ b
    assert np.allclose(d, geodesic_distance(np.eye(3), rel), atol=1e-7)


def test_fid_identical_sets(rng):
    x = FeatureSet(rng.normal(size=(50, 6)))
    assert abs(fid(x, x)) <= 1e-6


def test_fid_one_dimensional_closed_form():
    assert fid(FeatureSet([-1.0, 0.0, 1.0]), FeatureSet([0.0, 1.0, 2.0])) == 1.0


def _mp_fid(x, y):
    mpmath.mp.dps = 40
    mu = np.mean(x, 0) - np.mean(y, 0)
    sr = mpmath.matrix(np.cov(x, rowvar=False).tolist())
    sg = mpmath.matrix(np.cov(y, rowvar=False).tolist())
    cross = mpmath.sqrtm(sr * sg)
    tr = sum(cross[i, i] for i in range(cross.rows))
    tr_r = sum(sr[i, i] for i in range(sr.rows))
    tr_g = sum(sg[i, i] for i in range(sg.rows))
    return float(mpmath.re(float(mu @ mu) + tr_r + tr_g - 2 * tr))


def test_fid_matches_high_precision_oracle(rng):
    for _ in range(10):
        A = rng.normal(size=(4, 4))
        x = rng.normal(size=(40, 4)) @ A + rng.normal(size=4)
        y = rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4)) + rng.normal(size=4)
        assert abs(fid(FeatureSet(x), FeatureSet(y)) - _mp_fid(x, y)) <= 1e-6


def test_fid_symmetric_and_errors(rng):
    x, y = FeatureSet(rng.normal(size=(30, 3))), FeatureSet(rng.normal(size=(20, 3)) + 1)
    assert fid(x, y) == pytest.approx(fid(y, x), abs=1e-9)
    with pytest.raises(ValueError):
        fid(x, FeatureSet(rng.normal(size=(20, 4))))
    with pytest.raises(ValueError):
        fid(FeatureSet(np.zeros((1, 3))), x)


def sort_oracle(sim, R):
    hits = 0
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += i in order[:R]
    return hits / len(sim)


def test_r_precision_examples():
    assert r_precision(np.eye(5), 1) == 1.0
    N = 6
    sim = np.zeros((N, N))
    for i in range(N):
        sim[i, i] = 0.5
        sim[i, (i + 1) % N] = 1.0
    assert r_precision(sim, 1) == 0.0
    assert r_precision(sim, 2) == 1.0
    with pytest.raises(ValueError):
        r_precision(sim, 0)
    with pytest.raises(ValueError):
        r_precision(np.zeros((2, 3)), 1)


def test_r_precision_matches_sort_oracle(rng):
    for _ in range(100):
        sim = rng.normal(size=(32, 32))
        if rng.random() < 0.3:
            sim = np.round(sim, 1)  # ties
        for R in (1, 3, 10):
            assert r_precision(sim, R) == sort_oracle(sim, R)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_r_precision_monotone_in_r(N, seed):
    sim = np.random.default_rng(seed).normal(size=(N, N))
    vals = [r_precision(sim, R) for R in range(1, N + 1)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0


def test_motion_features_shape(rng):
    f = motion_features(rng.normal(size=(10, 4, 9)))
    assert f.shape == (22,) and np.all(np.isfinite(f))
    assert motion_features(np.zeros((1, 2, 9))).shape == (22,)
