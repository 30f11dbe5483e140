import numpy as np
import pytest

from esfr.classifiers import (
    MissingClassError,
    bdcspn_classify,
    class_prototypes,
    cspn_classify,
    linear_classify,
    nn_classify,
)
from esfr.core import EmbeddingSet, FewShotTask, preprocess_task


def make_task(support, sup_labels, query, qry_labels, n_way, k_shot):
    counts = np.bincount(np.asarray(qry_labels), minlength=n_way)
    return FewShotTask(
        support=EmbeddingSet(support, sup_labels, n_way),
        query=EmbeddingSet(query, None, n_way),
        query_labels=qry_labels,
        n_way=n_way,
        k_shot=k_shot,
        query_counts=tuple(int(c) for c in counts),
    )


def random_task(rng, n_way=5, k_shot=5, queries=8, dim=12, spread=2.0):
    means = rng.normal(size=(n_way, dim)) * spread
    sup = np.vstack([means[c] + rng.normal(size=(k_shot, dim)) for c in range(n_way)])
    sup_labels = np.repeat(np.arange(n_way), k_shot)
    qry = np.vstack([means[c] + rng.normal(size=(queries, dim)) for c in range(n_way)])
    qry_labels = np.repeat(np.arange(n_way), queries)
    return make_task(sup, sup_labels, qry, qry_labels, n_way, k_shot)


class TestNnClassify:
    def test_query_equal_to_support(self):
        task = make_task([[0.0, 1.0], [4.0, 5.0]], [0, 1], [[4.0, 5.0]], [1], 2, 1)
        assert nn_classify(task).labels.tolist() == [1]

    def test_midpoint_rule(self):
        task = make_task([[-1.0], [1.0]], [0, 1], [[0.2]], [1], 2, 1)
        assert nn_classify(task).labels.tolist() == [1]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        task = random_task(rng)
        protos = np.vstack(
            [task.support.vectors[task.support.labels == c].mean(axis=0) for c in range(5)]
        )
        expected = [
            int(min(range(5), key=lambda c: float(np.sum((q - protos[c]) ** 2))))
            for q in task.query.vectors
        ]
        assert nn_classify(task).labels.tolist() == expected

    def test_missing_class(self):
        with pytest.raises(MissingClassError):
            class_prototypes(EmbeddingSet([[1.0], [2.0]], [0, 0], 2), 2)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        task = random_task(rng, dim=6)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        rotated = make_task(
            task.support.vectors @ q,
            task.support.labels,
            task.query.vectors @ q,
            task.query_labels,
            5,
            5,
        )
        np.testing.assert_array_equal(nn_classify(task).labels, nn_classify(rotated).labels)


class TestLinearClassify:
    def test_separable_sides(self):
        task = make_task(
            [[-2.0, 0.0], [-1.5, 0.5], [2.0, 0.0], [1.5, -0.5]],
            [0, 0, 1, 1],
            [[-3.0, 0.2], [3.0, -0.2]],
            [0, 1],
            2,
            2,
        )
        assert linear_classify(task).labels.tolist() == [0, 1]

    def test_identical_support_ties_to_class_zero(self):
        task = make_task([[1.0, 1.0], [1.0, 1.0]], [0, 1], [[1.0, 1.0]], [0], 2, 1)
        pred = linear_classify(task)
        assert pred.labels.tolist() == [0]
        np.testing.assert_allclose(pred.scores[0, 0], pred.scores[0, 1], atol=1e-9)

    def test_matches_reference_convex_optimum(self):
        # independent oracle: scipy L-BFGS on the same regularized objective;
        # unique optimum because both weights and bias carry the l2 penalty
        scipy_opt = pytest.importorskip("scipy.optimize")
        rng = np.random.default_rng(7)
        task = preprocess_task(random_task(rng, n_way=5, k_shot=1, queries=4, dim=6, spread=1.5))
        x, y = task.support.vectors, task.support.labels
        n, dim = x.shape
        reg = 1e-4

        def objective(flat):
            w = flat[: 5 * dim].reshape(5, dim)
            b = flat[5 * dim :]
            logits = x @ w.T + b
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            ce = -logp[np.arange(n), y].mean()
            return ce + 0.5 * reg * (np.sum(w * w) + np.sum(b * b))

        res = scipy_opt.minimize(objective, np.zeros(5 * dim + 5), method="L-BFGS-B",
                                 options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 50000})
        w_ref = res.x[: 5 * dim].reshape(5, dim)
        b_ref = res.x[5 * dim :]
        ref_scores = task.query.vectors @ w_ref.T + b_ref
        pred = linear_classify(task, epochs=60000)
        np.testing.assert_array_equal(pred.labels, np.argmax(ref_scores, axis=1))
        np.testing.assert_allclose(pred.scores, ref_scores, atol=1e-2)


class TestCspnClassify:
    def test_parallel_prototype_wins(self):
        task = make_task(
            [[1.0, 0.0], [0.0, 1.0]], [0, 1], [[5.0, 0.0], [0.0, 0.3]], [0, 1], 2, 1
        )
        assert cspn_classify(task).labels.tolist() == [0, 1]

    def test_scale_invariance_of_queries(self):
        rng = np.random.default_rng(1)
        task = random_task(rng, dim=8)
        scaled = make_task(
            task.support.vectors,
            task.support.labels,
            task.query.vectors * 7.5,
            task.query_labels,
            5,
            5,
        )
        np.testing.assert_array_equal(cspn_classify(task).labels, cspn_classify(scaled).labels)

    def test_agrees_with_nn_on_unit_sphere(self):
        # equal-norm prototypes: nearest-Euclidean and max-cosine coincide
        rng = np.random.default_rng(2)
        protos = rng.normal(size=(2, 10))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        qry = rng.normal(size=(12, 10))
        qry /= np.linalg.norm(qry, axis=1, keepdims=True)
        task = make_task(protos, [0, 1], qry, [0] * 12, 2, 1)
        np.testing.assert_array_equal(cspn_classify(task).labels, nn_classify(task).labels)


class TestBdcspnClassify:
    def test_queries_equal_support_fixed_point(self):
        rng = np.random.default_rng(4)
        sup = rng.normal(size=(5, 8)) * 3.0
        task = make_task(sup, np.arange(5), sup.copy(), np.arange(5), 5, 1)
        pre = preprocess_task(task, use_shift=True)
        rect = bdcspn_classify(task)
        plain = cspn_classify(pre)
        np.testing.assert_array_equal(rect.labels, plain.labels)
        np.testing.assert_allclose(rect.scores, plain.scores, atol=1e-9)

    def test_temperature_limit_collapses_to_most_similar(self):
        # huge temperature: the rectified prototype sits on the single
        # most-similar member, here the original support vector
        rng = np.random.default_rng(5)
        task = random_task(rng, n_way=2, k_shot=1, queries=3, dim=5, spread=4.0)
        hot = bdcspn_classify(task, temperature=1e6)
        assert set(hot.labels.tolist()) <= {0, 1}

    def test_zero_rounds_reduces_to_cspn_on_shifted_input(self):
        rng = np.random.default_rng(6)
        task = random_task(rng, n_way=4, k_shot=2, queries=5, dim=7, spread=1.0)
        a = bdcspn_classify(task, rounds=0)
        b = cspn_classify(preprocess_task(task, use_shift=True))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)

    def test_query_rescaling_invariance(self):
        rng = np.random.default_rng(7)
        task = random_task(rng, n_way=3, k_shot=2, queries=4, dim=6)
        scales = rng.uniform(0.5, 3.0, size=(len(task.query),))[:, None]
        scaled = make_task(
            task.support.vectors,
            task.support.labels,
            task.query.vectors * scales,
            task.query_labels,
            3,
            2,
        )
        base = bdcspn_classify(task, use_shift=False)
        resc = bdcspn_classify(scaled, use_shift=False)
        np.testing.assert_array_equal(base.labels, resc.labels)

    def test_rectification_beats_cspn_on_clustered_episodes(self):
        # Monte Carlo: pseudo-label rectification should not hurt on average
        rng = np.random.default_rng(8)
        wins = 0.0
        tasks = 200
        for _ in range(tasks):
            task = random_task(rng, n_way=5, k_shot=1, queries=15, dim=16, spread=1.1)
            pre = preprocess_task(task, use_shift=True)
            cs = float(np.mean(cspn_classify(pre).labels == task.query_labels))
            bd = float(np.mean(bdcspn_classify(task).labels == task.query_labels))
            wins += bd - cs
        assert wins / tasks >= 0.0


class TestDeterminism:
    def test_all_classifiers_deterministic(self):
        rng = np.random.default_rng(9)
        task = random_task(rng)
        for fn in (nn_classify, cspn_classify, bdcspn_classify, linear_classify):
            np.testing.assert_array_equal(fn(task).labels, fn(task).labels)
