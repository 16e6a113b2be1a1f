import itertools

import numpy as np
import pytest

from scale_ull import encoder as enc
from scale_ull.evaluation import (
    EvalSet,
    acc_hungarian,
    contingency,
    evaluate,
    evaluate_features,
    jacobi_eigh,
    kmeans_cluster,
    knn_predict,
    normalized_laplacian,
    spectral_cluster,
    stratified_halves,
)
from scale_ull.numerics import l2_normalize_rows, make_rng


def blobs(seed, per=30, T=2, dim=2, spread=0.1):
    rng = np.random.default_rng(seed)
    centers = 5.0 * np.eye(T, dim) if dim >= T else rng.standard_normal((T, dim)) * 5
    x = np.vstack([centers[c] + spread * rng.standard_normal((per, dim)) for c in range(T)])
    return x, np.repeat(np.arange(T), per)


def brute_force_acc(pred, true, T):
    best = 0
    for perm in itertools.permutations(range(T)):
        best = max(best, sum(1 for p, t in zip(pred, true) if perm[p] == t))
    return best / len(true)


class TestKnn:
    def test_exact_match(self):
        ref = np.eye(3)
        assert knn_predict(ref, [2, 0, 1], ref[[1]], 1).tolist() == [0]

    def test_tie_goes_to_lower_label(self):
        ref = np.array([[1.0, 0.0], [0.0, 1.0]])
        query = np.array([[1.0, 1.0]]) / np.sqrt(2)
        assert knn_predict(ref, [0, 1], query, 2).tolist() == [0]

    def test_vote_tie_broken_by_similarity(self):
        ref = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0]])
        query = np.array([[0.0, 1.0]])
        # top-2 neighbours carry labels 1 and 0; label 0's neighbour is closer
        assert knn_predict(ref, [1, 1, 0, 1], query, 2).tolist() == [1]
        assert knn_predict(ref, [1, 0, 1, 1], query, 2).tolist() == [0]

    def test_matches_exhaustive_oracle(self):
        x, y = blobs(0, per=20)
        x = l2_normalize_rows(x + np.array([1.0, 1.0]))
        ref, query = np.arange(0, 40, 2), np.arange(1, 40, 2)
        k = 3
        expected = []
        for q in query:
            sims = [(float(x[q] @ x[r]), -i) for i, r in enumerate(ref)]
            top = sorted(sims, reverse=True)[:k]
            votes = np.bincount([y[ref[-i]] for _, i in top], minlength=2)
            expected.append(int(np.argmax(votes)))
        pred = knn_predict(x[ref], y[ref], x[query], k)
        assert pred.tolist() == expected
        assert np.mean(pred == y[query]) == np.mean(np.array(expected) == y[query])

    def test_k_clamped(self):
        assert knn_predict(np.eye(2), [0, 1], np.eye(2), 10).shape == (2,)


class TestKmeans:
    def test_one_cluster_per_point(self):
        x = np.random.default_rng(0).random((6, 2))
        history = []
        ids = kmeans_cluster(x, 6, make_rng(0), history=history)
        assert sorted(ids.tolist()) == list(range(6))
        assert history[-1] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_separated_blobs(self, seed):
        x, y = blobs(seed)
        ids = kmeans_cluster(x, 2, make_rng(seed))
        assert acc_hungarian(ids, y, 2).acc == 1.0

    def test_inertia_non_increasing(self):
        x, _ = blobs(1, per=50, T=4, dim=4, spread=2.0)
        history = []
        kmeans_cluster(x, 4, make_rng(1), history=history)
        assert len(history) > 1
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_bad_cluster_count(self):
        with pytest.raises(ValueError):
            kmeans_cluster(np.ones((3, 2)), 4, make_rng(0))


class TestSpectral:
    @pytest.mark.parametrize("n", [1, 2, 5, 8, 13])
    def test_jacobi_residuals(self, n):
        rng = np.random.default_rng(n)
        a = rng.standard_normal((n, n))
        a = a + a.T
        vals, vecs = jacobi_eigh(a)
        for lam, v in zip(vals, vecs.T):
            assert np.linalg.norm(a @ v - lam * v) < 1e-8
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)
        np.testing.assert_allclose(vals, np.linalg.eigvalsh(a), atol=1e-9)

    def test_laplacian_residuals(self):
        x, _ = blobs(2, per=40, T=3, dim=3, spread=1.0)
        lap = normalized_laplacian(x, 0.1)
        vals, vecs = jacobi_eigh(lap)
        res = np.linalg.norm(lap @ vecs - vecs * vals, axis=0)
        assert res.max() < 1e-8
        np.testing.assert_array_equal(lap, lap.T)

    def test_disconnected_blobs_split(self):
        x = np.vstack([np.tile([1.0, 0.0], (10, 1)), np.tile([0.0, 1.0], (10, 1))])
        x += 1e-3 * np.random.default_rng(0).standard_normal(x.shape)
        lap = normalized_laplacian(x, 0.01)
        vals, _ = jacobi_eigh(lap)
        assert abs(vals[0]) < 1e-8 and abs(vals[1]) < 1e-8
        ids = spectral_cluster(x, 2, make_rng(0), sigma=0.01)
        assert acc_hungarian(ids, np.repeat([0, 1], 10), 2).acc == 1.0

    def test_agrees_with_kmeans_on_separable_blobs(self):
        x, y = blobs(3, per=25, T=3, dim=3)
        assert acc_hungarian(spectral_cluster(x, 3, make_rng(0)), y, 3).acc == 1.0
        assert acc_hungarian(kmeans_cluster(x, 3, make_rng(0)), y, 3).acc == 1.0

    def test_row_cap(self):
        with pytest.raises(ValueError, match="capped"):
            spectral_cluster(np.ones((5, 2)), 2, make_rng(0), max_rows=4)


class TestAcc:
    def test_identity(self):
        y = np.array([0, 1, 2, 2, 1])
        res = acc_hungarian(y, y, 3)
        assert res.acc == 1.0 and res.mapping == {0: 0, 1: 1, 2: 2}

    def test_permuted_labels(self):
        y = np.array([0, 1, 2, 3, 3, 1])
        assert acc_hungarian(np.array([2, 0, 3, 1])[y], y, 4).acc == 1.0

    @pytest.mark.parametrize("T", [2, 3, 4, 5, 6])
    def test_brute_force(self, T):
        rng = np.random.default_rng(T)
        for _ in range(100):
            size = int(rng.integers(1, 30))
            pred, true = rng.integers(0, T, size), rng.integers(0, T, size)
            assert acc_hungarian(pred, true, T).acc == brute_force_acc(pred, true, T)

    def test_contingency_range(self):
        with pytest.raises(ValueError, match="must lie"):
            contingency([0, 3], [0, 1], 3)


class TestProtocol:
    def test_stratified_halves(self):
        labels = np.repeat([0, 1, 2], 10)
        ref, query = stratified_halves(labels, make_rng(0))
        assert np.bincount(labels[ref]).tolist() == [5, 5, 5]
        assert sorted(np.concatenate([ref, query]).tolist()) == list(range(30))

    def test_one_hot_embedding_is_perfect(self):
        labels = np.repeat(np.arange(4), 10)
        acc, knn = evaluate_features(np.eye(4)[labels], labels, 4, 3, make_rng(0))
        assert acc == 1.0 and knn == 1.0

    def test_relabel_and_scale_invariance(self):
        x, y = blobs(4, per=20, T=3, dim=3, spread=1.0)
        feats = l2_normalize_rows(x)
        base = evaluate_features(feats, y, 3, 5, make_rng(1), clustering="kmeans")
        relabeled = evaluate_features(feats, np.array([2, 0, 1])[y], 3, 5, make_rng(1), clustering="kmeans")
        assert base == relabeled
        assert knn_predict(3.0 * feats, y, 3.0 * feats[:5], 3).tolist() == knn_predict(feats, y, feats[:5], 3).tolist()

    def test_evaluate_deterministic(self):
        x, y = blobs(5, per=20, T=2, dim=3, spread=1.0)
        params = enc.init((3, 8, 4), make_rng(0))
        es = EvalSet(x, y)
        assert evaluate(params, es, 2, 5, make_rng(3)) == evaluate(params, es, 2, 5, make_rng(3))

    def test_random_encoder_near_raw_oracle(self):
        # identity-capable network on separable data keeps the classes apart
        x, y = blobs(6, per=30, T=2, dim=2, spread=0.3)
        x = x + 1.0
        params = enc.make_params([np.eye(2)], [np.zeros(2)])
        _, knn = evaluate(params, EvalSet(x, y), 2, 5, make_rng(0), clustering="kmeans")
        assert knn == 1.0

    def test_unbalanced_eval_set(self):
        with pytest.raises(ValueError, match="balanced"):
            EvalSet(np.ones((3, 2)), np.array([0, 0, 1]))
