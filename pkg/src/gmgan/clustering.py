"""Unsupervised clustering with a trained GM-GAN, plus ACC and NMI."""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import gan, latent, scorer, trainer
from .csvio import write_csv
from .data import Dataset
from .errors import ParameterError

BRUTE_FORCE_MAX = 8


@dataclass
class ClusterResult:
    soft: np.ndarray          # [n, K]
    hard: np.ndarray          # [n]
    acc: float | None = None
    nmi: float | None = None
    permutation: dict | None = None   # cluster id -> ground-truth class

    def write_csv(self, path, seed=None, config=None):
        K = self.soft.shape[1]
        header = ["sample_index", "hard"] + [f"soft_{k}" for k in range(K)]
        rows = ([i, int(h), *map(float, s)] for i, (h, s) in enumerate(zip(self.hard, self.soft)))
        write_csv(path, header, rows, seed, config)


def contingency(true_labels, cluster_ids, N=None, K=None):
    """counts[y, c] over samples; rows are ground-truth classes."""
    y = np.asarray(true_labels, dtype=np.intp)
    c = np.asarray(cluster_ids, dtype=np.intp)
    if y.shape != c.shape:
        raise ParameterError(f"length mismatch: {y.size} labels vs {c.size} cluster ids")
    N = int(y.max()) + 1 if N is None else N
    K = int(c.max()) + 1 if K is None else K
    if y.size and (y.min() < 0 or y.max() >= N or c.min() < 0 or c.max() >= K):
        raise ParameterError("label or cluster id outside its declared range")
    table = np.zeros((N, K), dtype=np.int64)
    np.add.at(table, (y, c), 1)
    return table


def _pad_square(table):
    n = max(table.shape)
    out = np.zeros((n, n), dtype=table.dtype)
    out[: table.shape[0], : table.shape[1]] = table
    return out


def best_match_brute_force(table):
    """(matched count, perm) maximizing sum_c table[perm[c], c] over all permutations."""
    sq = _pad_square(np.asarray(table))
    n = len(sq)
    cols = np.arange(n)
    best, best_perm = -1, None
    for perm in itertools.permutations(range(n)):
        total = int(sq[list(perm), cols].sum())
        if total > best:
            best, best_perm = total, perm
    return best, best_perm


def best_match_assignment(table):
    sq = _pad_square(np.asarray(table))
    rows, cols = linear_sum_assignment(sq, maximize=True)
    perm = np.empty(len(sq), dtype=np.intp)
    perm[cols] = rows
    return int(sq[rows, cols].sum()), tuple(int(p) for p in perm)


def best_match(table, method="auto"):
    if method == "auto":
        method = "brute" if max(np.shape(table)) <= BRUTE_FORCE_MAX else "assignment"
    if method == "brute":
        return best_match_brute_force(table)
    if method == "assignment":
        return best_match_assignment(table)
    raise ParameterError(f"unknown matching method {method!r}")


def acc(true_labels, cluster_ids, N=None, K=None, method="auto"):
    """Fraction of samples correct under the best one-to-one class/cluster matching."""
    table = contingency(true_labels, cluster_ids, N, K)
    total = table.sum()
    if total == 0:
        raise ParameterError("no samples")
    matched, _ = best_match(table, method)
    return matched / total


def _entropy_from_counts(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(true_labels, cluster_ids):
    """I(Y; C) / sqrt(H(Y) H(C)) over the empirical joint distribution (natural log)."""
    table = contingency(true_labels, cluster_ids).astype(np.float64)
    n = table.sum()
    if n == 0:
        raise ParameterError("no samples")
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    hy = _entropy_from_counts(table.sum(axis=1))
    hc = _entropy_from_counts(table.sum(axis=0))
    if hy == 0.0 or hc == 0.0:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        return 1.0 if same else 0.0
    pxy = table / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return min(1.0, max(0.0, mi / math.sqrt(hy * hc)))


def generate_labeled_synthetic(model, prior, M, rng, scale=1.0):
    """M generated samples per Gaussian, labeled with the Gaussian's index."""
    if M < 1:
        raise ParameterError("M must be at least 1")
    ks = np.repeat(np.arange(prior.K), M)
    z = latent.sample_latents(prior, ks, scale, rng).data
    x = gan.generate(model, z, track=False).data
    return Dataset(x, ks, "points")


@dataclass
class ClassifierConfig:
    hidden: tuple = (64, 64)
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


def cluster(X, K, M, train_cfg, clf_cfg=ClassifierConfig(), rng=None, return_model=False):
    """Cluster the rows of dataset X into K groups through a GM-GAN.

    X's labels, when present, are hidden from every training stage and used
    only to score the final assignment.
    """
    rng = np.random.default_rng(train_cfg.seed) if rng is None else rng
    labels = X.labels
    data = X.unlabeled()
    flat = data.flat()
    if K == 1:
        soft = np.ones((len(data), 1))
        result = ClusterResult(soft, np.zeros(len(data), dtype=np.intp))
        fitted = None
    else:
        cfg = dataclasses.replace(train_cfg, K=K, supervised=False, baseline=False)
        model, prior = trainer.build(cfg, data.dim, rng)
        fitted = trainer.train(cfg, data, model, prior, rng)
        synth = generate_labeled_synthetic(fitted.model, fitted.prior, M, rng)
        clf = scorer.train_classifier(synth, epochs=clf_cfg.epochs, seed=int(rng.integers(2**31)),
                                      lr=clf_cfg.lr, batch_size=clf_cfg.batch_size,
                                      hidden=clf_cfg.hidden, holdout=0.0)
        soft = clf.predict_proba(flat)
        # argmax picks the lowest index on ties
        result = ClusterResult(soft, np.argmax(soft, axis=1))
    if labels is not None:
        N = int(labels.max()) + 1
        table = contingency(labels, result.hard, N, K)
        matched, perm = best_match(table)
        result.acc = matched / len(labels)
        result.nmi = nmi(labels, result.hard)
        result.permutation = {c: int(perm[c]) for c in range(K) if perm[c] < N}
    return (result, fitted) if return_model else result
