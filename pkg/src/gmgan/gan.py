"""Generator/discriminator wrappers, adversarial losses and the label map f."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DimensionError, ParameterError

PROB_CLAMP = 1e-7
MODES = ("unsupervised", "supervised")


@dataclass
class GanModel:
    gen_spec: nn.MlpSpec
    gen_params: nn.ParamStore
    disc_spec: nn.MlpSpec
    disc_params: nn.ParamStore
    mode: str = "unsupervised"
    n_classes: int = 1
    label_map: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.intp))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        want = self.n_classes if self.mode == "supervised" else 1
        if self.disc_spec.d_out != want:
            raise ParameterError(f"{self.mode} discriminator needs output width {want}, "
                                 f"spec has {self.disc_spec.d_out}")
        if self.gen_spec.d_out != self.disc_spec.d_in:
            raise ParameterError("generator output width must equal discriminator input width")
        if not self.disc_spec.activations[-1].startswith("sigmoid"):
            raise ParameterError("discriminator head must be a sigmoid")
        self.label_map = np.asarray(self.label_map, dtype=np.intp)

    @property
    def latent_dim(self):
        return self.gen_spec.d_in

    @property
    def data_dim(self):
        return self.gen_spec.d_out

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_classes": self.n_classes,
            "label_map": self.label_map.tolist(),
            "generator": {"spec": self.gen_spec.to_dict(), "params": nn.params_to_dict(self.gen_params)},
            "discriminator": {"spec": self.disc_spec.to_dict(), "params": nn.params_to_dict(self.disc_params)},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            nn.MlpSpec.from_dict(d["generator"]["spec"]), nn.params_from_dict(d["generator"]["params"]),
            nn.MlpSpec.from_dict(d["discriminator"]["spec"]), nn.params_from_dict(d["discriminator"]["params"]),
            d["mode"], d["n_classes"], np.array(d["label_map"], dtype=np.intp),
        )


def build_model(data_dim, latent_dim, rng, *, mode="unsupervised", n_classes=1, K=1,
                label_table=None, gen_hidden=(128, 128), disc_hidden=(128, 128),
                slope=0.2, out_scale=1.0, weight_std=0.02):
    """MLP generator (leaky-relu hidden, scaled-tanh head) and sigmoid-headed discriminator."""
    n_out = n_classes if mode == "supervised" else 1
    gen_spec = nn.MlpSpec(
        (latent_dim, *gen_hidden, data_dim),
        (f"leaky_relu:{slope}",) * len(gen_hidden) + (f"tanh:{out_scale}",),
    )
    disc_spec = nn.MlpSpec(
        (data_dim, *disc_hidden, n_out),
        (f"leaky_relu:{slope}",) * len(disc_hidden) + ("sigmoid",),
    )
    label_map = make_label_map(K, n_classes, label_table) if mode == "supervised" else np.zeros(K, dtype=np.intp)
    return GanModel(gen_spec, nn.init_mlp(gen_spec, rng, weight_std), disc_spec,
                    nn.init_mlp(disc_spec, rng, weight_std), mode, n_classes, label_map)


def generate(model, z_batch, track=True):
    z = z_batch if isinstance(z_batch, nn.Tensor) else nn.Tensor(np.asarray(z_batch, dtype=np.float64))
    if z.data.ndim != 2 or z.shape[1] != model.latent_dim:
        raise DimensionError(f"latent batch shape {z.shape} does not match d={model.latent_dim}")
    return nn.mlp_forward(model.gen_spec, model.gen_params, z, track).output


def discriminate(model, x_batch, track=True):
    return nn.mlp_forward(model.disc_spec, model.disc_params, x_batch, track).output


def _probs(p):
    p = nn.as_tensor(p)
    return nn.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _log_p(p):
    return nn.log(_probs(p))


def _log_1mp(p):
    return nn.log(1.0 - _probs(p))


def loss_g_unsup(d_on_fake):
    """Non-saturating generator loss: mean of -log D(G(z))."""
    return -nn.tmean(_log_p(d_on_fake))


def loss_d_unsup(d_on_real, d_on_fake):
    """-E[log D(x)] - E[log(1 - D(G(z)))], without the 1/2 training factor."""
    return -nn.tmean(_log_p(d_on_real)) - nn.tmean(_log_1mp(d_on_fake))


def _one_hot(labels, n):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ParameterError(f"labels must lie in [0, {n})")
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _targeted_term(p, targets):
    """Per-sample -log p_target - sum_{m != target} log(1 - p_m), batch mean."""
    p = nn.as_tensor(p)
    onehot = _one_hot(targets, p.shape[1])
    per = _log_p(p) * onehot + _log_1mp(p) * (1.0 - onehot)
    return -nn.tmean(nn.tsum(per, axis=1))


def loss_g_sup(d_on_fake, component_ids, label_map):
    return _targeted_term(d_on_fake, np.asarray(label_map)[np.asarray(component_ids, dtype=np.intp)])


def loss_d_sup(d_on_real, labels, d_on_fake):
    """Real rows: label coordinate up, all others down. Fake rows: every coordinate down."""
    fake = -nn.tmean(nn.tsum(_log_1mp(d_on_fake), axis=1))
    return _targeted_term(d_on_real, labels) + fake


def make_label_map(K, N, assignment=None):
    """Gaussian index -> class label, as an int array of length K.

    Defaults: identity when K == N, k mod N when K > N, k when K < N.
    ``assignment`` may be a sequence or a {k: class} dict; missing keys
    fall back to the default.
    """
    if K < 1 or N < 1:
        raise ParameterError("K and N must be positive")
    table = np.arange(K, dtype=np.intp) % N
    if assignment is not None:
        items = assignment.items() if isinstance(assignment, dict) else enumerate(assignment)
        for k, cls in items:
            if not 0 <= int(k) < K:
                raise ParameterError(f"Gaussian index {k} out of range [0, {K})")
            if not 0 <= int(cls) < N:
                raise ParameterError(f"class {cls} for Gaussian {k} out of range [0, {N})")
            table[int(k)] = int(cls)
    return table
