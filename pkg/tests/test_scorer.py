import math

import numpy as np
import pytest
from scipy.stats import norm

from gmgan import data, scorer
from gmgan.errors import DimensionError, ParameterError, UnsupportedModalityError
from gmgan.msssim import ms_ssim


def toy_bayes_accuracy(variance=0.1):
    """Nearest-grid-point rule, which is Bayes optimal per axis for the toy grid."""
    t = norm.cdf(0.5 / math.sqrt(variance))
    per_axis = (2 * t + (2 * t - 1)) / 3
    return per_axis ** 2


def fixed_classifier(n_classes=3, d_in=2):
    spec = scorer.classifier_spec(d_in, n_classes, hidden=(4,))
    return scorer.FeatureClassifier(spec, scorer.init_fan_in(spec, np.random.default_rng(0)), 0, n_classes)


@pytest.fixture(scope="module")
def toy_classifier():
    ds = data.gen_toy(5000, rng=np.random.default_rng(0))
    return ds, scorer.train_classifier(ds, epochs=20, seed=0)


class TestClassifier:
    def test_toy_accuracy_near_bayes(self, toy_classifier):
        _, clf = toy_classifier
        bayes = toy_bayes_accuracy()
        assert bayes == pytest.approx(0.854, abs=1e-3)
        assert clf.holdout_accuracy >= bayes - 0.03

    def test_untrained_is_chance(self):
        ds = data.gen_toy(4000, rng=np.random.default_rng(1))
        clf = scorer.train_classifier(ds, epochs=0, seed=0, holdout=0.5)
        assert abs(clf.holdout_accuracy - 1 / 9) < 0.1

    def test_deterministic(self):
        ds = data.gen_toy(300, rng=np.random.default_rng(2))
        a = scorer.train_classifier(ds, epochs=2, seed=4)
        b = scorer.train_classifier(ds, epochs=2, seed=4)
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_single_class(self):
        ds = data.Dataset(np.zeros((5, 2)), np.zeros(5, dtype=int))
        with pytest.raises(ParameterError):
            scorer.train_classifier(ds)

    def test_output_layer_features_are_probabilities(self, toy_classifier):
        ds, clf = toy_classifier
        f = scorer.features(clf, ds.samples[:10], clf.spec.n_layers - 1)
        np.testing.assert_allclose(f.sum(axis=1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(f, clf.predict_proba(ds.samples[:10]))

    def test_zero_weight_features(self):
        clf = fixed_classifier()
        for t in clf.params.values():
            t.data[...] = 0.0
        assert np.all(scorer.features(clf, np.ones((3, 2)), 0) == 0.0)
        np.testing.assert_allclose(scorer.features(clf, np.ones((3, 2)), 1), 1 / 3)

    def test_feature_width_mismatch(self):
        with pytest.raises(DimensionError):
            scorer.features(fixed_classifier(), np.ones((3, 5)))


class TestNearestNeighbor:
    def test_self_match(self):
        F = np.random.default_rng(0).normal(size=(20, 4))
        assert scorer.nearest_neighbor(F[7], F) == (7, 0.0)

    def test_tie_goes_to_lower_index(self):
        F = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert scorer.nearest_neighbor([0.0, 0.0], F) == (0, 1.0)
        assert scorer.nearest_neighbor([0.0, 0.0], F[::-1]) == (0, 1.0)

    def test_against_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        F = rng.normal(size=(300, 6))
        Q = rng.normal(size=(100, 6))
        idx, dist = scorer.nearest_neighbors(Q, F)
        for q, i, dd in zip(Q, idx, dist):
            best_i, best_d = 0, math.inf
            for j, f in enumerate(F):
                dj = math.sqrt(sum((a - b) ** 2 for a, b in zip(q, f)))
                if dj < best_d:
                    best_i, best_d = j, dj
            assert i == best_i
            assert dd == pytest.approx(best_d, rel=1e-12)

    def test_empty_set(self):
        with pytest.raises(ParameterError):
            scorer.nearest_neighbor([0.0], np.zeros((0, 1)))


class TestQuality:
    def test_zero_distance(self):
        assert scorer.quality_from_distance(0.0, 1.0) == 0.5

    def test_limit(self):
        assert 0.0 <= scorer.quality_from_distance(800.0) < 1e-300
        assert scorer.quality_from_distance(50.0) < 1e-20

    @pytest.mark.parametrize("a", [0.1, 1.0, 7.5])
    def test_distance_log_a(self, a):
        assert scorer.quality_from_distance(math.log(a), a) == pytest.approx(0.5, abs=1e-15)

    def test_matches_definition(self):
        for dist in (0.0, 0.3, 2.0, 10.0):
            want = 1 - math.exp(dist) / (math.exp(dist) + 2.0)
            assert scorer.quality_from_distance(dist, 2.0) == pytest.approx(want, rel=1e-12)

    def test_set_of_constants(self):
        clf = fixed_classifier()
        F = scorer.features(clf, np.zeros((1, 2)))
        assert scorer.quality_set(np.zeros((5, 2)), clf, F) == 0.5

    def test_singleton_and_recompute(self):
        clf = fixed_classifier()
        rng = np.random.default_rng(2)
        F = scorer.features(clf, rng.normal(size=(30, 2)))
        X = rng.normal(size=(8, 2))
        assert scorer.quality_set(X[:1], clf, F) == pytest.approx(scorer.quality(X[0], clf, F))
        manual = np.mean([scorer.quality(x, clf, F, a=1.0) for x in X])
        assert scorer.quality_set(X, clf, F) == pytest.approx(manual, rel=1e-14)

    def test_empty(self):
        clf = fixed_classifier()
        with pytest.raises(ParameterError):
            scorer.quality_set(np.zeros((0, 2)), clf, np.zeros((1, 4)))


class TestDiversity:
    def test_d_intra_identical(self):
        img = np.random.default_rng(0).uniform(-1, 1, size=(28, 28, 1))
        assert scorer.d_intra(np.stack([img] * 3)) == pytest.approx(0.0, abs=1e-9)

    def test_d_intra_single(self):
        img = np.random.default_rng(0).uniform(-1, 1, size=(1, 28, 28, 1))
        assert scorer.d_intra(img) == pytest.approx(0.0, abs=1e-9)

    def test_d_intra_brute_force(self):
        X = np.random.default_rng(1).uniform(-1, 1, size=(4, 28, 28, 1))
        total = sum(ms_ssim(X[i], X[j]) for i in range(4) for j in range(4))
        assert abs(scorer.d_intra(X) - (1 - total / 16)) < 1e-12

    def test_d_intra_points(self):
        with pytest.raises(UnsupportedModalityError):
            scorer.d_intra(np.zeros((5, 2)))

    def test_d_inter_cases(self):
        eye = np.eye(4)
        assert scorer.d_inter_from_probs(eye) == pytest.approx(1.0, abs=1e-15)
        assert scorer.d_inter_from_probs(np.tile(eye[2], (5, 1))) == 0.0
        half = np.array([eye[0], eye[1]] * 3)
        assert scorer.d_inter_from_probs(half) == pytest.approx(0.5, abs=1e-15)

    def test_d_inter_argmax_tie(self):
        probs = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
        assert scorer.d_inter_from_probs(probs) == 0.0

    def test_d_inter_one_class(self):
        with pytest.raises(ParameterError):
            scorer.d_inter_from_probs(np.ones((3, 1)))

    @pytest.mark.parametrize("pair,want", [((1, 1), 1.0), ((0, 0.7), 0.0), ((0.5, 0.32), 0.4), ((0.49, 0.25), 0.35)])
    def test_geometric_means(self, pair, want):
        assert abs(scorer.geometric_mean(*pair) - want) < 1e-12
        assert abs(scorer.combined(*pair) - want) < 1e-12


def kl_double_loop(P):
    n, N = len(P), len(P[0])
    marg = [sum(P[i][y] for i in range(n)) / n for y in range(N)]
    kl = 0.0
    for i in range(n):
        for y in range(N):
            if P[i][y] > 0:
                kl += P[i][y] * math.log(P[i][y] / marg[y])
    return math.exp(kl / n)


class TestInceptionScore:
    def test_identical_rows(self):
        P = np.tile([0.2, 0.3, 0.5], (6, 1))
        assert scorer.inception_score_from_probs(P) == pytest.approx(1.0, abs=1e-15)

    def test_uniform_one_hot(self):
        assert abs(scorer.inception_score_from_probs(np.eye(7)) - 7) < 1e-9

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(40, 5)) * 3
        P = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        assert abs(scorer.inception_score_from_probs(P) - kl_double_loop(P.tolist())) < 1e-10

    def test_empty(self):
        with pytest.raises(ParameterError):
            scorer.inception_score_from_probs(np.zeros((0, 3)))


class TestNll:
    def test_standard_normal_origin(self):
        mix = (np.zeros((1, 2)), np.eye(2)[None], np.ones(1))
        assert scorer.nll_under_mixture(np.zeros((1, 2)), mix) == pytest.approx(math.log(2 * math.pi), abs=1e-12)
        assert math.log(2 * math.pi) == pytest.approx(1.837877, abs=1e-6)

    def test_toy_means(self):
        mix = data.toy_mixture()
        means = mix[0]
        want = []
        for x in means:
            dens = sum(math.exp(-np.sum((x - m) ** 2) / 0.2) for m in means) / (9 * 2 * math.pi * 0.1)
            want.append(-math.log(dens))
        assert want[4] == pytest.approx(1.7057, abs=1e-4)
        assert scorer.nll_under_mixture(means, mix) == pytest.approx(np.mean(want), rel=1e-12)

    def test_true_samples_match_entropy(self):
        mix = data.toy_mixture()
        # differential entropy by midpoint quadrature of -p log p on a fine grid
        h = 0.01
        g = np.arange(-3.5, 3.5, h) + h / 2
        xx, yy = np.meshgrid(g, g)
        dens = np.zeros_like(xx)
        for m in mix[0]:
            dens += np.exp(-((xx - m[0]) ** 2 + (yy - m[1]) ** 2) / 0.2) / (9 * 2 * math.pi * 0.1)
        entropy = -np.sum(dens * np.log(dens)) * h * h
        X = data.gen_toy(20_000, rng=np.random.default_rng(0)).samples
        logp = np.log(np.array([np.exp(-np.sum((x - mix[0]) ** 2, axis=1) / 0.2).sum() for x in X])
                      / (9 * 2 * math.pi * 0.1))
        se = logp.std() / math.sqrt(len(X))
        assert abs(scorer.nll_under_mixture(X, mix) - entropy) < 5 * se


class TestScoreReport:
    def test_image_report(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(6, 28 * 28))
        clf = fixed_classifier(3, 28 * 28)
        F = scorer.features(clf, rng.uniform(-1, 1, size=(10, 28 * 28)))
        rep = scorer.score_samples(X, clf, F, sigma=0.5, image_shape=(28, 28, 1))
        assert rep.d == pytest.approx(math.sqrt(rep.d_intra * rep.d_inter))
        assert rep.s == pytest.approx(math.sqrt(rep.q * rep.d))
        assert rep.nll is None and rep.n_samples == 6
        assert len(rep.row()) == len(scorer.ScoreReport.HEADER)

    def test_points_report(self):
        clf = fixed_classifier()
        X = np.random.default_rng(1).normal(size=(20, 2))
        rep = scorer.score_samples(X, clf, scorer.features(clf, X), mixture=data.toy_mixture())
        assert rep.d_intra is None and rep.s is None and rep.q == 0.5
        assert rep.nll == pytest.approx(scorer.nll_under_mixture(X, data.toy_mixture()))
