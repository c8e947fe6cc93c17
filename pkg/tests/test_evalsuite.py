import numpy as np
import pytest

from jointdet.errors import ContractError, UndefinedMetricError
from jointdet.evalsuite import (EvalConfig, homography_estimation,
                                match_descriptors, matching_score, nn_map,
                                repeatability, summarize_rows)
from jointdet.geometry import warp_points
from jointdet.postprocess import KeypointSet


def kp_set(xy, descriptors=None):
    xy = np.asarray(xy, dtype=float)
    return KeypointSet(xy, np.ones(len(xy)), descriptors)


def random_unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestMatchDescriptors:
    def test_identical_sets_identity_matching(self):
        rng = np.random.default_rng(0)
        desc = random_unit_rows(rng, 10, 8)
        a = kp_set(rng.uniform(0, 50, size=(10, 2)), desc)
        b = kp_set(a.xy.copy(), desc.copy())
        matches = match_descriptors(a, b)
        assert len(matches.pairs) == 10
        for i, j, d in matches.pairs:
            assert i == j
            assert d == 0.0

    def test_cardinality_bound(self):
        rng = np.random.default_rng(1)
        a = kp_set([[1, 1]], random_unit_rows(rng, 1, 4))
        b = kp_set([[1, 1], [2, 2], [3, 3]], random_unit_rows(rng, 3, 4))
        assert len(match_descriptors(a, b).pairs) <= 1

    def test_matches_exhaustive_mutual_nn_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            da = random_unit_rows(rng, 20, 6)
            db = random_unit_rows(rng, 20, 6)
            a = kp_set(rng.uniform(0, 100, size=(20, 2)), da)
            b = kp_set(rng.uniform(0, 100, size=(20, 2)), db)
            got = {(i, j) for i, j, _ in match_descriptors(a, b).pairs}
            # exhaustive oracle
            expect = set()
            for i in range(20):
                dists_i = [np.linalg.norm(da[i] - db[j]) for j in range(20)]
                j = int(np.argmin(dists_i))
                dists_j = [np.linalg.norm(da[k] - db[j]) for k in range(20)]
                if int(np.argmin(dists_j)) == i:
                    expect.add((i, j))
            assert got == expect

    def test_missing_descriptors(self):
        a = kp_set([[0, 0]])
        b = kp_set([[0, 0]])
        with pytest.raises(ContractError):
            match_descriptors(a, b)

    def test_one_to_one(self):
        rng = np.random.default_rng(3)
        a = kp_set(rng.uniform(0, 10, (15, 2)), random_unit_rows(rng, 15, 4))
        b = kp_set(rng.uniform(0, 10, (12, 2)), random_unit_rows(rng, 12, 4))
        matches = match_descriptors(a, b)
        ia = [p[0] for p in matches.pairs]
        ib = [p[1] for p in matches.pairs]
        assert len(set(ia)) == len(ia)
        assert len(set(ib)) == len(ib)


class TestRepeatability:
    def test_identical_sets_identity(self):
        rng = np.random.default_rng(4)
        a = kp_set(rng.uniform(5, 55, size=(20, 2)))
        assert repeatability(a, a, np.eye(3), eps=3.0,
                             shape_a=(64, 64), shape_b=(64, 64)) == 1.0

    def test_disjoint_sets(self):
        a = kp_set([[5, 5], [10, 10]])
        b = kp_set([[50, 50], [55, 55]])
        assert repeatability(a, b, np.eye(3), eps=3.0,
                             shape_a=(64, 64), shape_b=(64, 64)) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        h = np.array([[1.02, 0.01, 2.0], [-0.01, 0.99, -1.0], [1e-5, 0, 1]])
        a = kp_set(rng.uniform(5, 55, size=(15, 2)))
        b = kp_set(rng.uniform(5, 55, size=(18, 2)))
        r1 = repeatability(a, b, h, 3.0, shape_a=(64, 64), shape_b=(64, 64))
        r2 = repeatability(b, a, np.linalg.inv(h), 3.0, shape_a=(64, 64), shape_b=(64, 64))
        assert abs(r1 - r2) < 1e-12

    def test_large_eps_saturates(self):
        rng = np.random.default_rng(6)
        a = kp_set(rng.uniform(10, 50, size=(9, 2)))
        b = kp_set(rng.uniform(10, 50, size=(7, 2)))
        assert repeatability(a, b, np.eye(3), eps=1e6,
                             shape_a=(64, 64), shape_b=(64, 64)) == 1.0

    def test_empty_sets_undefined(self):
        with pytest.raises(UndefinedMetricError):
            repeatability(kp_set(np.zeros((0, 2))), kp_set(np.zeros((0, 2))),
                          np.eye(3), 3.0)

    def test_storage_order_invariance(self):
        rng = np.random.default_rng(7)
        xy_a = rng.uniform(5, 55, size=(12, 2))
        xy_b = rng.uniform(5, 55, size=(12, 2))
        h = np.eye(3)
        r1 = repeatability(kp_set(xy_a), kp_set(xy_b), h, 3.0, (64, 64), (64, 64))
        perm = rng.permutation(12)
        r2 = repeatability(kp_set(xy_a[perm]), kp_set(xy_b[perm]), h, 3.0,
                           (64, 64), (64, 64))
        assert r1 == r2


class TestHomographyEstimation:
    def test_recovers_known_homography(self):
        rng = np.random.default_rng(8)
        true_h = np.array([[1.05, 0.02, 4.0], [-0.01, 0.98, -2.0], [1e-5, -2e-5, 1.0]])
        xy_a = rng.uniform(10, 300, size=(40, 2))
        xy_b = warp_points(xy_a, true_h)
        desc = random_unit_rows(rng, 40, 16)
        a = kp_set(xy_a, desc)
        b = kp_set(xy_b, desc.copy())
        est = homography_estimation(a, b, true_h, (320, 480), eps_list=(1.0, 3.0, 5.0))
        assert est.correct[1.0]
        assert est.correct[3.0]
        assert est.mean_corner_error < 1.0

    def test_random_clouds_incorrect(self):
        rng = np.random.default_rng(9)
        a = kp_set(rng.uniform(0, 300, size=(30, 2)), random_unit_rows(rng, 30, 8))
        b = kp_set(rng.uniform(0, 300, size=(30, 2)), random_unit_rows(rng, 30, 8))
        true_h = np.array([[1, 0, 100.0], [0, 1, 50.0], [0, 0, 1]])
        est = homography_estimation(a, b, true_h, (320, 480))
        assert not any(est.correct.values())

    def test_too_few_matches(self):
        rng = np.random.default_rng(10)
        a = kp_set([[1, 1], [2, 2]], random_unit_rows(rng, 2, 4))
        b = kp_set([[1, 1], [2, 2]], random_unit_rows(rng, 2, 4))
        est = homography_estimation(a, b, np.eye(3), (64, 64))
        assert est.degenerate
        assert not any(est.correct.values())


class TestNnMap:
    def test_all_correct(self):
        rng = np.random.default_rng(11)
        xy = rng.uniform(10, 50, size=(10, 2))
        desc = random_unit_rows(rng, 10, 8)
        assert nn_map(kp_set(xy, desc), kp_set(xy, desc.copy()), np.eye(3), 3.0) == 1.0

    def test_all_incorrect(self):
        rng = np.random.default_rng(12)
        xy_a = rng.uniform(0, 20, size=(8, 2))
        xy_b = xy_a + 100.0
        desc = random_unit_rows(rng, 8, 8)
        assert nn_map(kp_set(xy_a, desc), kp_set(xy_b, desc.copy()), np.eye(3), 3.0) == 0.0

    def test_five_correct_ranked_first(self):
        # 10 queries; the 5 with smallest match distance are correct -> AP 1.0
        n = 10
        d = 16
        desc_b = np.eye(d)[:n]
        desc_a = desc_b.copy()
        for i in range(n):
            # distance to the matched partner grows with i
            desc_a[i, i] = 1.0 - 0.05 * (i + 1)
            desc_a[i] /= np.linalg.norm(desc_a[i])
        xy_b = np.arange(n, dtype=float)[:, None] * np.array([[20.0, 10.0]])
        xy_a = xy_b.copy()
        xy_a[5:] += 50.0   # geometrically wrong matches rank last
        got = nn_map(kp_set(xy_a, desc_a), kp_set(xy_b, desc_b), np.eye(3), 3.0)
        assert abs(got - 1.0) < 1e-9

    def test_interleaved_matches_trapezoid_oracle(self):
        rng = np.random.default_rng(13)
        n = 12
        desc_b = np.eye(16)[:n]
        desc_a = desc_b.copy()
        dists = rng.uniform(0.1, 0.9, size=n)
        for i in range(n):
            desc_a[i, i] = 1.0 - dists[i]
            desc_a[i] /= np.linalg.norm(desc_a[i])
        xy_b = np.arange(n, dtype=float)[:, None] * np.array([[15.0, 8.0]])
        xy_a = xy_b.copy()
        wrong = rng.choice(n, size=5, replace=False)
        xy_a[wrong] += 40.0
        got = nn_map(kp_set(xy_a, desc_a), kp_set(xy_b, desc_b), np.eye(3), 3.0)

        # trapezoidal AP oracle from the (recall 0, precision 1) anchor
        match_dist = np.linalg.norm(desc_a - desc_b, axis=1)
        order = np.argsort(match_dist)
        flags = np.array([i not in wrong for i in order], dtype=float)
        total = flags.sum()
        pts = [(0.0, 1.0)]
        tp = 0.0
        for k, f in enumerate(flags, 1):
            tp += f
            pts.append((tp / total, tp / k))
        expect = sum((r2 - r1) * (p1 + p2) / 2 for (r1, p1), (r2, p2) in zip(pts, pts[1:]))
        assert abs(got - expect) < 1e-9

    def test_empty_undefined(self):
        with pytest.raises(UndefinedMetricError):
            nn_map(kp_set(np.zeros((0, 2)), np.zeros((0, 4))),
                   kp_set(np.zeros((0, 2)), np.zeros((0, 4))), np.eye(3), 3.0)


class TestMatchingScore:
    def test_identical_sets(self):
        rng = np.random.default_rng(14)
        xy = rng.uniform(5, 55, size=(10, 2))
        desc = random_unit_rows(rng, 10, 8)
        score = matching_score(kp_set(xy, desc), kp_set(xy, desc.copy()), np.eye(3),
                               3.0, shape_a=(64, 64), shape_b=(64, 64))
        assert score == 1.0

    def test_constructed_half_correct(self):
        # 8 points per side, all mutually matched, exactly 4 geometrically
        # correct, all inside the shared region -> 0.5
        n = 8
        desc = np.eye(n)
        xy_b = np.stack([np.linspace(5, 55, n), np.linspace(5, 55, n)], axis=1)
        xy_a = xy_b.copy()
        xy_a[4:, 0] += 7.0   # beyond eps but still in bounds
        score = matching_score(kp_set(xy_a, desc), kp_set(xy_b, desc.copy()),
                               np.eye(3), 3.0, shape_a=(64, 64), shape_b=(64, 64))
        assert abs(score - 0.5) < 1e-12

    def test_empty_shared_region_undefined(self):
        desc = np.eye(2)
        a = kp_set([[5.0, 5.0], [6.0, 6.0]], desc)
        b = kp_set([[5.0, 5.0], [6.0, 6.0]], desc.copy())
        h = np.array([[1, 0, 1000.0], [0, 1, 0], [0, 0, 1]])
        with pytest.raises(UndefinedMetricError):
            matching_score(a, b, h, 3.0, shape_a=(64, 64), shape_b=(64, 64))


def test_summarize_rows_splits():
    rows = [("i_dome", "repeatability", 0.6), ("i_dome", "nn_map", 0.5),
            ("v_wall", "repeatability", 0.4)]
    summary = summarize_rows(rows)
    assert summary["illumination"]["repeatability"] == 0.6
    assert summary["viewpoint"]["repeatability"] == 0.4
