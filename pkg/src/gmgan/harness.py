"""Experiment orchestration: flat key=value configs and the CSV-emitting recipes.

Every recipe writes CSVs with a provenance comment line and returns the
rows it wrote, so callers can check results without re-reading files.
Repeat ``r`` of an experiment uses seed ``seed + r``; every random stream
inside a repeat is derived from that seed, never from wall-clock state.
"""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import clustering, data, gan, latent, scorer, trainer
from .csvio import write_csv
from .errors import ParameterError
from .msssim import MsSsimParams

EXPERIMENTS = ("train", "toy-convergence", "sigma-sweep", "score", "cluster", "gen-toy")
TOY_SIGMA_GRID = (0.25, 0.5, 1.0, 1.5, 2.0)
IMAGE_SIGMA_GRID = tuple(round(0.5 + 0.1 * i, 1) for i in range(16))
TOY_OUT_SCALE = 1.5
TOY_LATENT_DIM = 2
CONVERGENCE_VARIANTS = ("gan", "gmgan", "sup-baseline", "sup-gmgan")
NLL_SAMPLES = 1000

# independent random streams within one repeat
_STREAM_DATA, _STREAM_EVAL, _STREAM_SCORE, _STREAM_CLF = 1, 2, 3, 4


class ConfigError(ParameterError):
    pass


@dataclass
class ExperimentConfig:
    """Everything one CLI invocation needs; TrainConfig keys live in ``train``."""

    experiment: str = "train"
    seed: int = 0
    out: str = "out"
    repeat: int = 1
    # dataset
    dataset: str = "toy"                      # toy | idx
    toy_n: int = 5000
    toy_variance: float = data.TOY_VARIANCE
    images: str = "data/mnist-subset/images-idx3-ubyte.gz"
    labels: str = "data/mnist-subset/labels-idx1-ubyte.gz"
    per_class: int = 0                        # 0 keeps every sample
    # training
    epochs: int = 0                           # > 0 overrides iters
    checkpoint: str = ""                      # score / sigma-sweep: load instead of training
    variants: tuple = CONVERGENCE_VARIANTS
    nll_every: int = 1
    # scoring
    a: float = 1.0
    layer: int = -1                           # -1: penultimate classifier layer
    sigma: float = 1.0
    sigma_grid: tuple = ()                    # empty: dataset default
    n_samples: int = 1000
    n_pairs: int = 100
    msssim_window: int = 11
    msssim_sigma: float = 1.5
    clf_hidden: tuple = (64, 64)
    clf_epochs: int = 20
    clf_lr: float = 1e-3
    # clustering
    M: int = 1000
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    explicit: frozenset = frozenset()         # keys set by the user

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.repeat < 1:
            raise ConfigError("repeat must be at least 1")
        if any(s <= 0 for s in self.sigma_grid) or self.sigma <= 0:
            raise ConfigError("sigma values must be positive")
        if self.dataset not in ("toy", "idx"):
            raise ConfigError(f"dataset must be toy or idx, got {self.dataset!r}")
        unknown = set(self.variants) - set(CONVERGENCE_VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")

    @property
    def is_toy(self):
        return self.dataset == "toy"

    def grid(self):
        if self.sigma_grid:
            return tuple(self.sigma_grid)
        return TOY_SIGMA_GRID if self.is_toy else IMAGE_SIGMA_GRID

    def ms_params(self):
        return MsSsimParams(window=self.msssim_window, sigma=self.msssim_sigma)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("train", "explicit")}
        d["train"] = self.train.to_dict()
        return d

    def provenance(self):
        """What the config hash covers: everything except where outputs go."""
        d = self.to_dict()
        del d["out"]
        return d


# ---------------------------------------------------------------------------
# parsing

_HARNESS_KEYS = {f.name: f for f in fields(ExperimentConfig) if f.name not in ("train", "explicit")}
_TRAIN_KEYS = {f.name: f for f in fields(trainer.TrainConfig)}


def _resolve(owner, f):
    return typing.get_type_hints(owner)[f.name]


def _convert(key, text, typ):
    text = text.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(key, text, inner)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        if typ is str:
            return text
        if typ is tuple or origin is tuple:
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",")]
            if all(p.lstrip("-").isdigit() for p in parts):
                return tuple(int(p) for p in parts)
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                if any(p[:1].isdigit() or p[:1] in "-." for p in parts):
                    raise
                return tuple(parts)
    except ValueError:
        pass
    else:
        raise ConfigError(f"key {key}: unsupported type {typ}")
    name = getattr(typ, "__name__", str(typ))
    expected = "a comma-separated list" if (typ is tuple or origin is tuple) else name
    raise ConfigError(f"key {key}: expected {expected}, got {text!r}")


def parse_pairs(pairs):
    """Apply ``key=value`` strings in order; returns {key: typed value}."""
    values = {}
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, text = raw.split("=", 1)
        key = key.strip()
        if key in _HARNESS_KEYS:
            typ = _resolve(ExperimentConfig, _HARNESS_KEYS[key])
        elif key in _TRAIN_KEYS:
            typ = _resolve(trainer.TrainConfig, _TRAIN_KEYS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, text, typ)
    return values


def read_config_file(path):
    """Lines of ``key = value``; blank lines and ``#`` comments are skipped."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        pairs.append(line)
    return pairs


def parse_config(path=None, overrides=(), **flags):
    """Defaults, then the file at ``path``, then ``overrides``, then keyword flags."""
    pairs = read_config_file(path) if path else []
    values = parse_pairs([*pairs, *overrides])
    values.update({k: v for k, v in flags.items() if v is not None})
    harness = {k: v for k, v in values.items() if k in _HARNESS_KEYS}
    train = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    unknown = set(values) - set(harness) - set(train)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    try:
        tc = trainer.TrainConfig(**train)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**harness, train=tc, explicit=frozenset(values))


# ---------------------------------------------------------------------------
# shared pieces


def load_dataset(cfg, seed):
    if cfg.is_toy:
        return data.gen_toy(cfg.toy_n, cfg.toy_variance, np.random.default_rng([seed, _STREAM_DATA]))
    ds = data.load_idx(cfg.images, cfg.labels)
    if cfg.per_class:
        ds = data.subset(ds, cfg.per_class, seed)
    return ds


def train_config_for(cfg, ds, seed, variant=None):
    """Resolve dataset-dependent defaults and the variant flags into a TrainConfig."""
    tc = cfg.train
    changes = {"seed": seed}
    n_classes = ds.n_classes
    if "n_classes" not in cfg.explicit and n_classes:
        changes["n_classes"] = n_classes
    if "K" not in cfg.explicit and n_classes:
        changes["K"] = n_classes
    if cfg.is_toy:
        if "out_scale" not in cfg.explicit:
            changes["out_scale"] = TOY_OUT_SCALE
        if "d" not in cfg.explicit:
            changes["d"] = TOY_LATENT_DIM
    if variant is not None:
        changes["baseline"] = variant in ("gan", "sup-baseline")
        changes["supervised"] = variant.startswith("sup-")
    if cfg.epochs > 0:
        changes["iters"] = cfg.epochs * tc.epoch_size(len(ds))
    return dataclasses.replace(tc, **changes)


def generate_set(model, prior, n, sigma, rng):
    """n generated rows with z | k ~ N(mu_k, sigma * Sigma_k), k ~ Categorical(alpha)."""
    _, z = latent.sample_marginal(prior, n, sigma, rng)
    return gan.generate(model, z.data, track=False).data


def toy_nll(model, prior, rng, sigma=1.0, n=NLL_SAMPLES):
    return scorer.nll_under_mixture(generate_set(model, prior, n, sigma, rng), data.toy_mixture())


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mean_se(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# recipes


def run_train(cfg):
    out = _out(cfg)
    ds = load_dataset(cfg, cfg.seed)
    tc = train_config_for(cfg, ds, cfg.seed)
    hook = None
    if cfg.is_toy:
        def hook(epoch, model, prior):
            if epoch % cfg.nll_every == 0:
                return {"nll": toy_nll(model, prior, np.random.default_rng([cfg.seed, _STREAM_EVAL, epoch]))}
    result = trainer.fit(tc, ds, epoch_hook=hook)
    trainer.snapshot(result, out / "checkpoint.json")
    result.history.write_csv(out / "history.csv", cfg.seed, cfg.provenance())
    if result.history.epoch_metrics:
        result.history.write_metrics_csv(out / "epoch_metrics.csv", cfg.seed, cfg.provenance())
    return result


def run_toy_convergence(cfg):
    """Per-epoch NLL of 10^3 generated points for each variant, epoch 0 included."""
    if not cfg.is_toy:
        raise ConfigError("toy-convergence needs dataset=toy")
    out = _out(cfg)
    rows = []
    for r in range(cfg.repeat):
        seed = cfg.seed + r
        ds = load_dataset(cfg, seed)
        for variant in cfg.variants:
            tc = train_config_for(cfg, ds, seed, variant)
            rng = np.random.default_rng(seed)
            model, prior = trainer.build(tc, ds.dim, rng)

            def nll_at(epoch, model, prior):
                # the same evaluation stream for every variant at a given epoch
                return toy_nll(model, prior, np.random.default_rng([seed, _STREAM_EVAL, epoch]))

            rows.append([r, seed, variant, 0, nll_at(0, model, prior)])

            def hook(epoch, model, prior):
                if epoch % cfg.nll_every == 0:
                    rows.append([r, seed, variant, epoch, nll_at(epoch, model, prior)])

            trainer.train(tc, ds, model, prior, rng, epoch_hook=hook)
    write_csv(out / "toy_convergence.csv", ["repeat", "seed", "variant", "epoch", "nll"], rows,
              cfg.seed, cfg.provenance())
    return rows


def _score_context(cfg, ds, seed):
    """Classifier trained on the GAN's own training data, plus its training features."""
    layer = None if cfg.layer < 0 else cfg.layer
    clf = scorer.train_classifier(ds, epochs=cfg.clf_epochs, seed=int(np.random.default_rng(
        [seed, _STREAM_CLF]).integers(2**31)), lr=cfg.clf_lr, hidden=cfg.clf_hidden, feature_layer=layer)
    return clf, scorer.features(clf, ds.flat())


def _score_at(cfg, ds, model, prior, clf, feats, sigma, rng):
    X = generate_set(model, prior, cfg.n_samples, sigma, rng)
    return scorer.score_samples(
        X, clf, feats, sigma=sigma, a=cfg.a, ms_params=cfg.ms_params(),
        image_shape=ds.image_shape, mixture=data.toy_mixture(cfg.toy_variance) if cfg.is_toy else None,
        n_pairs=cfg.n_pairs,
    )


def _trained(cfg, ds, seed):
    if cfg.checkpoint:
        return trainer.load_snapshot(cfg.checkpoint)
    return trainer.fit(train_config_for(cfg, ds, seed), ds)


SWEEP_METRICS = ("q", "d_intra", "d_inter", "d", "s", "is", "nll")


def run_sigma_sweep(cfg):
    """Scores at every sigma for each repeat, plus a mean / standard-error summary."""
    out = _out(cfg)
    raw = []
    for r in range(cfg.repeat):
        seed = cfg.seed + r
        ds = load_dataset(cfg, seed)
        result = _trained(cfg, ds, seed)
        clf, feats = _score_context(cfg, ds, seed)
        for sigma in cfg.grid():
            # same draws at every sigma so only the covariance scale varies
            rng = np.random.default_rng([seed, _STREAM_SCORE])
            rep = _score_at(cfg, ds, result.model, result.prior, clf, feats, sigma, rng)
            raw.append([r, seed, *rep.row()])
    header = ["repeat", "seed", *scorer.ScoreReport.HEADER]
    write_csv(out / "sigma_sweep.csv", header, raw, cfg.seed, cfg.provenance())

    summary = []
    col = {name: header.index(name) for name in SWEEP_METRICS}
    for sigma in cfg.grid():
        rows = [row for row in raw if row[2] == sigma]
        line = [sigma, len(rows)]
        for name in SWEEP_METRICS:
            line += list(_mean_se(row[col[name]] for row in rows))
        summary.append(line)
    sum_header = ["sigma", "repeats"] + [f"{m}_{s}" for m in SWEEP_METRICS for s in ("mean", "se")]
    write_csv(out / "sigma_sweep_summary.csv", sum_header, summary, cfg.seed, cfg.provenance())
    return raw, summary


def run_score(cfg):
    """One ScoreReport for a checkpoint (or a fresh training run) at ``sigma``."""
    out = _out(cfg)
    ds = load_dataset(cfg, cfg.seed)
    result = _trained(cfg, ds, cfg.seed)
    clf, feats = _score_context(cfg, ds, cfg.seed)
    rep = _score_at(cfg, ds, result.model, result.prior, clf, feats, cfg.sigma,
                    np.random.default_rng([cfg.seed, _STREAM_SCORE]))
    write_csv(out / "score.csv", scorer.ScoreReport.HEADER, [rep.row()], cfg.seed, cfg.provenance())
    return rep


def run_cluster(cfg):
    """Clustering per repeat; assignments per repeat plus one metrics row each."""
    out = _out(cfg)
    rows = []
    clf_cfg = clustering.ClassifierConfig(hidden=cfg.clf_hidden, epochs=cfg.clf_epochs, lr=cfg.clf_lr)
    for r in range(cfg.repeat):
        seed = cfg.seed + r
        ds = load_dataset(cfg, seed)
        tc = train_config_for(cfg, ds, seed, "gmgan")
        res = clustering.cluster(ds, tc.K, cfg.M, tc, clf_cfg, np.random.default_rng(seed))
        res.write_csv(out / f"cluster_assignments_{r}.csv", seed, cfg.provenance())
        rows.append([r, seed, tc.K, res.acc, res.nmi])
    write_csv(out / "cluster_metrics.csv", ["repeat", "seed", "K", "acc", "nmi"], rows, cfg.seed, cfg.provenance())
    return rows


def run_gen_toy(cfg):
    out = _out(cfg)
    ds = load_dataset(dataclasses.replace(cfg, dataset="toy"), cfg.seed)
    data.write_toy_csv(ds, out / "toy.csv", cfg.seed, cfg.provenance())
    return ds


RECIPES = {
    "train": run_train,
    "toy-convergence": run_toy_convergence,
    "sigma-sweep": run_sigma_sweep,
    "score": run_score,
    "cluster": run_cluster,
    "gen-toy": run_gen_toy,
}


def run(cfg):
    return RECIPES[cfg.experiment](cfg)
