import dataclasses
import math

import numpy as np
import pytest

from gmgan import data, nn, trainer
from gmgan.errors import FormatError, NumericError, ParameterError

SMALL = dict(K=3, d=4, b_D=16, b_G=32, gen_hidden=(16,), disc_hidden=(16,), out_scale=1.5)


class CountingDataset(data.Dataset):
    """Records every real-data read."""

    def __post_init__(self):
        super().__post_init__()
        self.reads = []

    def batch(self, index):
        self.reads.append(len(index))
        return super().batch(index)


def toy(n=200, seed=0):
    return data.gen_toy(n, rng=np.random.default_rng(seed))


def state_bytes(result):
    stores = [result.model.gen_params, result.model.disc_params]
    blob = b"".join(t.data.tobytes() for s in stores for t in s.values())
    return blob + result.prior.mu.data.tobytes() + result.prior.factor.data.tobytes()


class TestConfig:
    @pytest.mark.parametrize("field", ["K", "d", "b_D", "b_G"])
    def test_positive_sizes(self, field):
        with pytest.raises(ParameterError):
            trainer.TrainConfig(**{field: 0})

    def test_epoch_size(self):
        assert trainer.TrainConfig(b_D=64).epoch_size(5000) == 79
        assert trainer.TrainConfig(b_D=64).epoch_size(64) == 1

    def test_variants(self):
        assert trainer.TrainConfig(baseline=True).variant == "gan"
        assert trainer.TrainConfig().variant == "gmgan"
        assert trainer.TrainConfig(supervised=True, n_classes=3, baseline=True).variant == "sup-baseline"

    def test_round_trip(self):
        cfg = trainer.TrainConfig(label_table=(1, 0), gen_hidden=(3, 4))
        assert trainer.TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrain:
    def test_zero_iters_is_identity(self):
        cfg = trainer.TrainConfig(iters=0, **SMALL)
        rng = np.random.default_rng(0)
        model, prior = trainer.build(cfg, 2, rng)
        before = {k: t.data.copy() for k, t in model.gen_params.items()}
        r = trainer.train(cfg, toy(), model, prior, rng)
        for k, t in r.model.gen_params.items():
            assert t.data.tobytes() == before[k].tobytes()
        assert r.history.iterations == 0

    def test_first_losses_with_zero_discriminator(self):
        cfg = trainer.TrainConfig(iters=1, **SMALL)
        rng = np.random.default_rng(0)
        model, prior = trainer.build(cfg, 2, rng)
        for t in model.disc_params.values():
            t.data[...] = 0.0
        r = trainer.train(cfg, toy(), model, prior, rng)
        assert r.history.loss_d[0] == pytest.approx(math.log(2), abs=1e-12)
        # the G step sees D after one Adam step, so L(G) only approximately ln 2
        assert r.history.loss_g[0] == pytest.approx(math.log(2), abs=0.01)

    def test_real_data_reads(self):
        cfg = trainer.TrainConfig(iters=7, **SMALL)
        ds = CountingDataset(toy().samples)
        trainer.fit(cfg, ds)
        assert ds.reads == [cfg.b_D] * 7

    def test_reproducible(self):
        cfg = trainer.TrainConfig(iters=30, **SMALL)
        a = trainer.fit(cfg, toy())
        b = trainer.fit(cfg, toy())
        assert a.history.loss_d == b.history.loss_d and a.history.loss_g == b.history.loss_g
        assert state_bytes(a) == state_bytes(b)

    def test_static_prior_frozen_dynamic_moves(self):
        static = trainer.fit(trainer.TrainConfig(iters=40, **SMALL), toy())
        rng = np.random.default_rng(0)
        init_mu = trainer.build(trainer.TrainConfig(iters=0, **SMALL), 2, rng)[1].mu.data
        assert static.prior.mu.data.tobytes() == init_mu.tobytes()
        dyn = trainer.fit(trainer.TrainConfig(iters=40, dynamic=True, **SMALL), toy())
        assert np.abs(dyn.prior.mu.data - init_mu).max() > 0
        assert np.all(np.isfinite(dyn.prior.factor.data))

    def test_supervised_needs_labels(self):
        cfg = trainer.TrainConfig(iters=2, supervised=True, n_classes=9, **{**SMALL, "K": 9})
        with pytest.raises(ParameterError):
            trainer.fit(cfg, toy().unlabeled())

    @pytest.mark.parametrize("baseline", [False, True])
    def test_supervised_runs(self, baseline):
        cfg = trainer.TrainConfig(iters=5, supervised=True, n_classes=9, baseline=baseline, **{**SMALL, "K": 9})
        r = trainer.fit(cfg, toy())
        assert r.model.disc_spec.d_out == 9
        assert r.prior.K == 9 and len(r.history.loss_g) == 5

    def test_nan_reports_iteration(self):
        cfg = trainer.TrainConfig(iters=3, **SMALL)
        ds = toy()
        ds.samples[:] = np.nan
        with pytest.raises(NumericError, match="iteration 1"):
            trainer.fit(cfg, ds)

    def test_dimension_mismatch(self):
        cfg = trainer.TrainConfig(iters=1, **SMALL)
        model, prior = trainer.build(cfg, 3, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            trainer.train(cfg, toy(), model, prior, np.random.default_rng(0))

    def test_epoch_hook_and_history_lengths(self):
        cfg = trainer.TrainConfig(iters=26, **SMALL)    # 200 / 16 -> 13 iterations per epoch
        seen = []
        r = trainer.fit(cfg, toy(), epoch_hook=lambda e, m, p: seen.append(e) or {"x": float(e)})
        assert seen == [1, 2]
        assert r.history.epoch_metrics == [{"epoch": 1, "x": 1.0}, {"epoch": 2, "x": 2.0}]
        assert len(r.history.epoch_seconds) == 2

    def test_toy_outputs_inside_box(self):
        cfg = trainer.TrainConfig(K=9, d=2, iters=79 * 20, out_scale=1.5)
        r = trainer.fit(cfg, toy(5000))
        from gmgan import gan, latent
        rng = np.random.default_rng(1)
        _, z = latent.sample_marginal(r.prior, 1000, 1.0, rng)
        x = gan.generate(r.model, z.data, track=False).data
        assert np.mean(np.all(np.abs(x) <= 1.5, axis=1)) >= 0.95


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        r = trainer.fit(trainer.TrainConfig(iters=10, dynamic=True, **SMALL), toy())
        trainer.snapshot(r, tmp_path / "a.json")
        trainer.snapshot(trainer.load_snapshot(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_resume_zero_reproduces(self, tmp_path):
        r = trainer.fit(trainer.TrainConfig(iters=10, **SMALL), toy())
        trainer.snapshot(r, tmp_path / "a.json")
        again = trainer.resume(tmp_path / "a.json", toy(), 0)
        trainer.snapshot(again, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    @pytest.mark.parametrize("dynamic", [False, True])
    def test_resume_equivalence(self, tmp_path, dynamic):
        cfg = trainer.TrainConfig(iters=50, dynamic=dynamic, **SMALL)
        whole = trainer.fit(dataclasses.replace(cfg, iters=100), toy())
        half = trainer.fit(cfg, toy())
        trainer.snapshot(half, tmp_path / "h.json")
        rest = trainer.resume(tmp_path / "h.json", toy(), 50)
        assert state_bytes(rest) == state_bytes(whole)
        assert rest.history.loss_d == whole.history.loss_d

    def test_bad_version(self, tmp_path):
        r = trainer.fit(trainer.TrainConfig(iters=1, **SMALL), toy())
        p = tmp_path / "a.json"
        trainer.snapshot(r, p)
        p.write_text(p.read_text().replace('"format_version":1', '"format_version":2'))
        with pytest.raises(FormatError):
            trainer.load_snapshot(p)

    def test_wrong_kind(self, tmp_path):
        p = tmp_path / "p.json"
        nn.save_params(nn.ParamStore(w=np.ones(2)), p)
        with pytest.raises(FormatError):
            trainer.load_snapshot(p)

    def test_periodic_snapshot(self, tmp_path):
        cfg = trainer.TrainConfig(iters=10, snapshot_every=4, **SMALL)
        rng = np.random.default_rng(cfg.seed)
        model, prior = trainer.build(cfg, 2, rng)
        trainer.train(cfg, toy(), model, prior, rng, snapshot_path=tmp_path / "s.json")
        assert trainer.load_snapshot(tmp_path / "s.json").history.iterations == 8

    def test_history_csv(self, tmp_path):
        r = trainer.fit(trainer.TrainConfig(iters=3, **SMALL), toy())
        r.history.write_csv(tmp_path / "h.csv", seed=0, config=r.config.to_dict())
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[1] == "iter,loss_d,loss_g" and len(lines) == 5
        assert float(lines[2].split(",")[1]) == r.history.loss_d[0]
