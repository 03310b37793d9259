"""The alternating GM-GAN training loop, checkpoints and training history."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import gan, latent, nn
from .csvio import write_csv
from .errors import FormatError, NumericError, ParameterError

log = logging.getLogger(__name__)

VARIANTS = ("gan", "gmgan", "sup-baseline", "sup-gmgan")


@dataclass
class TrainConfig:
    K: int = 10
    d: int = 100
    c: float = 0.1
    sigma_init: float = 0.15
    iters: int = 1000
    b_D: int = 64
    b_G: int = 128
    gamma: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    supervised: bool = False
    dynamic: bool = False
    baseline: bool = False          # N(0, I) prior instead of a learned/static mixture
    full_factor: bool = False
    n_classes: int = 1
    label_table: tuple | None = None
    seed: int = 0
    snapshot_every: int = 0
    gen_hidden: tuple = (128, 128)
    disc_hidden: tuple = (128, 128)
    slope: float = 0.2
    out_scale: float = 1.0
    weight_std: float = 0.02

    def __post_init__(self):
        for name in ("K", "d", "b_D", "b_G"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1")
        if self.iters < 0 or self.snapshot_every < 0:
            raise ParameterError("iters and snapshot_every must be non-negative")
        if self.sigma_init <= 0:
            raise ParameterError("sigma_init must be positive")
        if self.supervised and self.n_classes < 1:
            raise ParameterError("supervised training needs n_classes >= 1")
        self.gen_hidden = tuple(self.gen_hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        if self.label_table is not None:
            self.label_table = tuple(self.label_table)

    @property
    def variant(self):
        if self.supervised:
            return "sup-baseline" if self.baseline else "sup-gmgan"
        return "gan" if self.baseline else "gmgan"

    def epoch_size(self, n):
        """Iterations per reporting epoch: ceil(n / b_D)."""
        return max(1, math.ceil(n / self.b_D))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("gen_hidden", "disc_hidden", "label_table"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainHistory:
    loss_d: list = field(default_factory=list)
    loss_g: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)   # dicts with at least "epoch"
    epoch_seconds: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.loss_d)

    def to_dict(self):
        return {"loss_d": self.loss_d, "loss_g": self.loss_g,
                "epoch_metrics": self.epoch_metrics, "epoch_seconds": self.epoch_seconds}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["loss_d"]), list(d["loss_g"]), list(d["epoch_metrics"]), list(d["epoch_seconds"]))

    def write_csv(self, path, seed=None, config=None):
        rows = [(i + 1, ld, lg) for i, (ld, lg) in enumerate(zip(self.loss_d, self.loss_g))]
        write_csv(path, ["iter", "loss_d", "loss_g"], rows, seed, config)

    def write_metrics_csv(self, path, seed=None, config=None):
        keys = sorted({k for m in self.epoch_metrics for k in m} - {"epoch"})
        rows = [[m["epoch"]] + [m.get(k) for k in keys] for m in self.epoch_metrics]
        write_csv(path, ["epoch", *keys], rows, seed, config)


@dataclass
class TrainResult:
    model: gan.GanModel
    prior: latent.MixturePrior
    history: TrainHistory
    opt_d: nn.AdamState
    opt_g: nn.AdamState
    rng: np.random.Generator
    config: TrainConfig


def build(config, data_dim, rng):
    """Fresh (model, prior) for ``config``: mixture init first, then G, then D."""
    if config.baseline:
        if config.supervised:
            # one N(0, I) component per class: the index only carries the target label
            K = config.n_classes
            prior = latent.MixturePrior(nn.Tensor(np.zeros((K, config.d))), nn.Tensor(np.ones((K, config.d))),
                                        np.full(K, 1.0 / K), "static")
        else:
            prior = latent.standard_normal_prior(config.d)
    else:
        prior = latent.init_static(config.K, config.d, config.c, config.sigma_init, rng,
                                   mode="dynamic" if config.dynamic else "static",
                                   full_factor=config.full_factor)
    model = gan.build_model(
        data_dim, config.d, rng,
        mode="supervised" if config.supervised else "unsupervised",
        n_classes=config.n_classes if config.supervised else 1,
        K=prior.K, label_table=config.label_table,
        gen_hidden=config.gen_hidden, disc_hidden=config.disc_hidden,
        slope=config.slope, out_scale=config.out_scale, weight_std=config.weight_std,
    )
    return model, prior


def _check(value, term):
    if not math.isfinite(value):
        raise NumericError(f"non-finite {term}")
    return value


def _step(config, dataset, model, prior, rng, opt_d, opt_g, gen_store, supervised):
    """One D update then one G update; returns the two loss values."""
    n = len(dataset)

    # discriminator step
    idx = rng.integers(0, n, size=config.b_D)
    x_real = dataset.batch(idx)
    ks = latent.sample_component(prior, rng, size=config.b_D)
    z = latent.sample_latents(prior, ks, 1.0, rng).detach()
    x_fake = gan.generate(model, z, track=False).detach()
    d_real = gan.discriminate(model, x_real)
    d_fake = gan.discriminate(model, x_fake)
    if supervised:
        raw = gan.loss_d_sup(d_real, dataset.batch_labels(idx), d_fake)
    else:
        raw = gan.loss_d_unsup(d_real, d_fake)
    loss_d = raw * 0.5
    ld = _check(loss_d.item(), "discriminator loss")
    model.disc_params.zero_grad()
    nn.backprop(loss_d)
    nn.adam_step(model.disc_params, opt_d)

    # generator step: never reads real data
    ks = latent.sample_component(prior, rng, size=config.b_G)
    z = latent.sample_latents(prior, ks, 1.0, rng)
    # D weights are read as constants so no D gradients are formed
    d_fake = gan.discriminate(model, gan.generate(model, z), track=False)
    if supervised:
        loss_g = gan.loss_g_sup(d_fake, ks, model.label_map)
    else:
        loss_g = gan.loss_g_unsup(d_fake)
    lg = _check(loss_g.item(), "generator loss")
    gen_store.zero_grad()
    nn.backprop(loss_g)
    nn.adam_step(gen_store, opt_g)

    return ld, lg


def train(config, dataset, model, prior, rng, *, opt_d=None, opt_g=None, history=None,
          epoch_hook: Callable | None = None, snapshot_path=None):
    """Run ``config.iters`` more iterations of alternating D/G updates.

    Per iteration: b_D real rows drawn with replacement and b_D generated rows
    give one Adam step on D with loss (L_real + L_fake) / 2; then b_G fresh
    generated rows give one Adam step on G (and on the prior in dynamic mode).
    ``epoch_hook(epoch, model, prior)`` runs after each completed epoch and
    may return a metrics dict; it must not touch ``rng``. With
    ``config.snapshot_every`` and ``snapshot_path`` set, a checkpoint is
    rewritten every ``snapshot_every`` iterations.
    """
    if model.mode == "supervised" and dataset.labels is None:
        raise ParameterError("supervised training needs a labeled dataset")
    if model.data_dim != dataset.dim:
        raise ParameterError(f"model emits {model.data_dim} dims, dataset has {dataset.dim}")
    n = len(dataset)
    if n == 0:
        raise ParameterError("empty dataset")
    opt_d = opt_d or nn.AdamState(config.gamma, config.beta1, config.beta2, config.adam_eps)
    opt_g = opt_g or nn.AdamState(config.gamma, config.beta1, config.beta2, config.adam_eps)
    history = history or TrainHistory()
    supervised = model.mode == "supervised"
    gen_store = model.gen_params.merged(prior.params(), prefixes=["gen.", "prior."])
    epoch_size = config.epoch_size(n)
    tick = time.perf_counter()

    for _ in range(config.iters):
        it = history.iterations + 1
        try:
            ld, lg = _step(config, dataset, model, prior, rng, opt_d, opt_g, gen_store, supervised)
        except NumericError as exc:
            raise NumericError(f"{exc} at iteration {it}") from None

        history.loss_d.append(ld)
        history.loss_g.append(lg)

        if it % epoch_size == 0:
            epoch = it // epoch_size
            now = time.perf_counter()
            history.epoch_seconds.append(now - tick)
            tick = now
            if epoch_hook is not None:
                metrics = epoch_hook(epoch, model, prior)
                if metrics is not None:
                    history.epoch_metrics.append({"epoch": epoch, **metrics})
            if epoch % 10 == 0:
                log.debug("epoch %d it %d loss_d %.4f loss_g %.4f", epoch, it, ld, lg)
        if snapshot_path is not None and config.snapshot_every and it % config.snapshot_every == 0:
            snapshot(TrainResult(model, prior, history, opt_d, opt_g, rng, config), snapshot_path)

    for name, p in gen_store.merged(model.disc_params).items():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {name} became non-finite")
    return TrainResult(model, prior, history, opt_d, opt_g, rng, config)


def fit(config, dataset, *, epoch_hook=None):
    """Build from ``config.seed`` and train; the usual entry point."""
    rng = np.random.default_rng(config.seed)
    model, prior = build(config, dataset.dim, rng)
    return train(config, dataset, model, prior, rng, epoch_hook=epoch_hook)


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(state):
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)


def checkpoint_dict(result):
    return {
        "kind": "gmgan-checkpoint",
        "config": result.config.to_dict(),
        "model": result.model.to_dict(),
        "prior": result.prior.to_dict(),
        "opt_d": result.opt_d.to_dict(),
        "opt_g": result.opt_g.to_dict(),
        "rng": _rng_state(result.rng),
        "history": result.history.to_dict(),
    }


def snapshot(result, path):
    Path(path).write_text(nn.dumps_document(checkpoint_dict(result)))


def load_snapshot(path):
    doc = nn.loads_document(Path(path).read_text())
    if doc.get("kind") != "gmgan-checkpoint":
        raise FormatError(f"{path} is not a gmgan checkpoint")
    try:
        return TrainResult(
            gan.GanModel.from_dict(doc["model"]),
            latent.MixturePrior.from_dict(doc["prior"]),
            TrainHistory.from_dict(doc["history"]),
            nn.AdamState.from_dict(doc["opt_d"]),
            nn.AdamState.from_dict(doc["opt_g"]),
            _rng_from_state(doc["rng"]),
            TrainConfig.from_dict(doc["config"]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint missing field {exc.args[0]!r}") from None


def resume(path, dataset, iters, epoch_hook=None):
    """Continue a snapshot for ``iters`` more iterations."""
    r = load_snapshot(path)
    config = dataclasses.replace(r.config, iters=iters)
    out = train(config, dataset, r.model, r.prior, r.rng, opt_d=r.opt_d, opt_g=r.opt_g,
                history=r.history, epoch_hook=epoch_hook)
    # the stored config counts every iteration run so far
    out.config = dataclasses.replace(r.config, iters=r.config.iters + iters)
    return out
