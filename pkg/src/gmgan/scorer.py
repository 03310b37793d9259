"""Sample-quality and diversity scores computed with a locally trained classifier.

The classifier is trained on the same data as the GAN. Quality is read from
nearest-neighbor distances in one of its hidden layers; inter-class
diversity from its hard predictions; intra-class diversity from pairwise
MS-SSIM between generated images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import softmax, xlogy

from . import latent, nn
from .errors import DimensionError, ParameterError, UnsupportedModalityError
from .msssim import MsSsimParams, ms_ssim, pairwise_ms_ssim

PROB_FLOOR = 1e-300


@dataclass
class FeatureClassifier:
    spec: nn.MlpSpec
    params: nn.ParamStore
    feature_layer: int          # index into the layer outputs; n_layers - 1 is the softmax layer
    n_classes: int
    holdout_accuracy: float = float("nan")

    def __post_init__(self):
        if not 0 <= self.feature_layer < self.spec.n_layers:
            raise ParameterError(f"feature layer {self.feature_layer} outside [0, {self.spec.n_layers})")

    def predict_proba(self, x):
        logits = nn.mlp_forward(self.spec, self.params, _flat(x), track=False).output.data
        return softmax(logits, axis=1)

    def predict(self, x):
        return np.argmax(self.predict_proba(x), axis=1)


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def classifier_spec(d_in, n_classes, hidden=(64, 64), slope=0.2):
    return nn.MlpSpec((d_in, *hidden, n_classes), (f"leaky_relu:{slope}",) * len(hidden) + ("identity",))


def train_classifier(ds, spec=None, epochs=20, seed=0, *, lr=1e-3, batch_size=64,
                     holdout=0.1, feature_layer=None, hidden=(64, 64)):
    """Cross-entropy MLP classifier; reports accuracy on a held-out split.

    The default feature layer is the penultimate one (last hidden layer).
    """
    if ds.labels is None:
        raise ParameterError("classifier training needs labels")
    n_classes = ds.n_classes
    if len(np.unique(ds.labels)) < 2:
        raise ParameterError("classifier training needs at least two classes")
    spec = spec or classifier_spec(ds.dim, n_classes, hidden)
    if spec.d_out < n_classes:
        raise ParameterError(f"classifier has {spec.d_out} outputs for {n_classes} classes")
    rng = np.random.default_rng(seed)
    params = init_fan_in(spec, rng)

    X, y = ds.flat(), ds.labels
    order = rng.permutation(len(X))
    n_hold = int(round(holdout * len(X)))
    hold, fit_idx = order[:n_hold], order[n_hold:]
    opt = nn.AdamState(lr=lr, beta1=0.9, beta2=0.999)
    for _ in range(epochs):
        perm = fit_idx[rng.permutation(len(fit_idx))]
        for start in range(0, len(perm), batch_size):
            b = perm[start:start + batch_size]
            loss = cross_entropy(nn.mlp_forward(spec, params, X[b]).output, y[b])
            params.zero_grad()
            nn.backprop(loss)
            nn.adam_step(params, opt)
    layer = spec.n_layers - 2 if feature_layer is None else feature_layer
    clf = FeatureClassifier(spec, params, max(layer, 0), spec.d_out)
    if n_hold:
        clf.holdout_accuracy = float(np.mean(clf.predict(X[hold]) == y[hold]))
    return clf


def init_fan_in(spec, rng):
    """N(0, 1/fan_in) weights and zero biases."""
    params = nn.ParamStore()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params[f"W{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def cross_entropy(logits, labels):
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -nn.tmean(nn.tsum(nn.log_softmax(logits) * onehot, axis=1))


def features(clf, x, layer=None):
    """Activations c_l(x); the last layer yields softmax probabilities."""
    layer = clf.feature_layer if layer is None else layer
    if not 0 <= layer < clf.spec.n_layers:
        raise ParameterError(f"layer {layer} outside [0, {clf.spec.n_layers})")
    trace = nn.mlp_forward(clf.spec, clf.params, _flat(x), track=False)
    out = trace.activations[layer].data
    if layer == clf.spec.n_layers - 1:
        out = softmax(out, axis=1)
    return out


def nearest_neighbors(queries, train_features, chunk=256):
    """Exact Euclidean nearest neighbor for each query row; ties go to the lowest index.

    A BLAS pass shortlists candidates; their distances are then recomputed
    directly so the returned distance does not carry cancellation error.
    """
    Fm = np.asarray(train_features, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Fm.ndim != 2 or len(Fm) == 0:
        raise ParameterError("nearest-neighbor search needs a non-empty feature set")
    if Q.shape[1] != Fm.shape[1]:
        raise DimensionError(f"query width {Q.shape[1]} != feature width {Fm.shape[1]}")
    f2 = np.einsum("ij,ij->i", Fm, Fm)
    idx = np.empty(len(Q), dtype=np.intp)
    dist = np.empty(len(Q))
    for s in range(0, len(Q), chunk):
        q = Q[s:s + chunk]
        q2 = np.einsum("ij,ij->i", q, q)
        approx = q2[:, None] + f2[None, :] - 2.0 * (q @ Fm.T)
        slack = 1e-9 * (q2[:, None] + f2.max()) + 1e-12
        best = approx.min(axis=1, keepdims=True)
        for r, row in enumerate(approx <= best + slack):
            cand = np.flatnonzero(row)
            diff = Fm[cand] - q[r]
            exact = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            k = np.argmin(exact)   # first minimum = lowest index among candidates
            idx[s + r], dist[s + r] = cand[k], exact[k]
    return idx, dist


def nearest_neighbor(x, train_features):
    i, d = nearest_neighbors(np.atleast_2d(x), train_features)
    return int(i[0]), float(d[0])


def quality_from_distance(dist, a=1.0):
    """1 - e^dist / (e^dist + a), evaluated as a / (a + e^dist)."""
    if a <= 0:
        raise ParameterError("a must be positive")
    dist = np.asarray(dist, dtype=np.float64)
    with np.errstate(over="ignore"):
        q = np.where(dist > 700.0, a * np.exp(-np.minimum(dist, 1e300)), a / (a + np.exp(np.minimum(dist, 700.0))))
    return q if q.ndim else float(q)


def quality(x, clf, train_features, a=1.0, layer=None):
    _, dist = nearest_neighbor(features(clf, np.asarray(x)[None], layer)[0], train_features)
    return quality_from_distance(dist, a)


def quality_set(X, clf, train_features, a=1.0, layer=None):
    """Mean per-sample quality over X."""
    if len(X) == 0:
        raise ParameterError("quality of an empty set is undefined")
    _, dist = nearest_neighbors(features(clf, X, layer), train_features)
    return float(np.mean(quality_from_distance(dist, a)))


def d_intra(images, params=MsSsimParams()):
    """1 - mean clamped MS-SSIM over all ordered pairs of X, self-pairs included."""
    images = np.asarray(images)
    if images.ndim not in (3, 4):
        raise UnsupportedModalityError("intra-class diversity is only defined for image samples")
    if len(images) == 0:
        raise ParameterError("empty sample set")
    sims = pairwise_ms_ssim(images, params, clamp=True)
    return float(1.0 - sims.sum() / len(images) ** 2)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    # adding 0.0 turns -0.0 into 0.0
    return float(-np.sum(xlogy(p, p))) + 0.0


def d_inter_from_probs(probs, soft=False):
    """Entropy of the mean (one-hot by default) prediction, divided by log N."""
    probs = np.asarray(probs, dtype=np.float64)
    n, N = probs.shape
    if N < 2:
        raise ParameterError("inter-class diversity needs N >= 2 classes")
    if n == 0:
        raise ParameterError("empty sample set")
    if soft:
        mean = probs.mean(axis=0)
    else:
        mean = np.bincount(np.argmax(probs, axis=1), minlength=N) / n
    return entropy(mean) / math.log(N)


def d_inter(X, clf, soft=False):
    return d_inter_from_probs(clf.predict_proba(X), soft)


def geometric_mean(a, b):
    return math.sqrt(a * b)


def diversity(X_images, clf, params=MsSsimParams()):
    """sqrt(d_intra * d_inter) for image samples."""
    images = np.asarray(X_images)
    return geometric_mean(d_intra(images, params), d_inter(images, clf))


def combined(q, d):
    return geometric_mean(q, d)


def inception_score_from_probs(probs):
    """exp(E_x KL(p(y|x) || p(y))); 0 log 0 terms are dropped, p(y) is floored."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ParameterError("the score is undefined for an empty sample set")
    marginal = np.maximum(probs.mean(axis=0), PROB_FLOOR)
    kl = np.sum(xlogy(probs, probs) - xlogy(probs, marginal[None, :]), axis=1)
    return float(math.exp(kl.mean()))


def classifier_is(X, clf):
    return inception_score_from_probs(clf.predict_proba(X))


def nll_under_mixture(X, mixture):
    """Mean negative log-likelihood of the rows of X under (means, covariances, weights)."""
    means, covs, weights = mixture
    return -float(np.mean(latent.mixture_log_density_batch(means, covs, weights, _flat(X))))


@dataclass
class ScoreReport:
    sigma: float
    q: float
    d_intra: float | None
    d_inter: float
    d: float | None
    s: float | None
    classifier_is: float
    nll: float | None
    n_samples: int

    HEADER = ("sigma", "q", "d_intra", "d_inter", "d", "s", "is", "nll", "n_samples")

    def row(self):
        return [self.sigma, self.q, self.d_intra, self.d_inter, self.d, self.s,
                self.classifier_is, self.nll, self.n_samples]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def score_samples(X, clf, train_features, *, sigma=1.0, a=1.0, layer=None,
                  ms_params=MsSsimParams(), image_shape=None, mixture=None, n_pairs=None):
    """Every score for one generated set X (flat rows).

    ``image_shape`` enables MS-SSIM diversity; ``n_pairs`` restricts it to
    the first ``n_pairs`` samples since the pair count is quadratic.
    """
    X = _flat(X)
    probs = clf.predict_proba(X)
    q = quality_set(X, clf, train_features, a, layer)
    dint = d_inter_from_probs(probs)
    if image_shape is not None:
        imgs = X.reshape((-1, *image_shape))
        if n_pairs is not None:
            imgs = imgs[:n_pairs]
        dintra = d_intra(imgs, ms_params)
        d = geometric_mean(dintra, dint)
        s = combined(q, d)
    else:
        dintra = d = s = None
    nll = nll_under_mixture(X, mixture) if mixture is not None else None
    return ScoreReport(sigma, q, dintra, dint, d, s, inception_score_from_probs(probs), nll, len(X))
