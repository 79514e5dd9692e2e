import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from trajden import model
from trajden.autodiff import load_checkpoint
from trajden.diffusion import NumericalError
from trajden.geometry import Pose
from trajden.trainer import (
    ConfigError,
    RasterCache,
    TrainConfig,
    env_seed,
    load_model,
    log_path_for,
    perturb_pose,
    read_log,
    sample_grads,
    sample_rng,
    sidecar_path,
    total_loss,
    train,
    training_sample,
)

TINY = TrainConfig(batch=2, epochs=2, seed=3)


@pytest.fixture(scope="module")
def train_set(small_dataset):
    return [s for s in small_dataset[1] if s.split == "train"]


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.weight_decay, c.alpha, c.lam, c.batch, c.epochs) == (1e-4, 1e-2, 1.0, 1.0, 8, 30)
        assert (c.perturb_rot, c.perturb_trans, c.ablation_mode) == (30.0, 30.0, "full")

    def test_from_text(self):
        c = TrainConfig.from_text("lr = 0.001  # faster\n\nbatch=4\nablation_mode = no_loc\n")
        assert (c.lr, c.batch, c.ablation_mode) == (1e-3, 4, "no_loc")

    def test_round_trip(self):
        c = TrainConfig(lr=3e-4, alpha=0.5, seed=9)
        assert TrainConfig.from_text(c.to_text()) == c

    def test_override_beats_file(self):
        assert TrainConfig.from_text("seed = 4\n", seed=11).seed == 11
        assert TrainConfig.from_text("seed = 4\n", seed=None).seed == 4

    @pytest.mark.parametrize("text", ["colour = red", "lr 0.1", "batch = 2.5", "lr = -1", "ablation_mode = none",
                                      "smoothing = 0.7", "epochs = 0"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            TrainConfig.from_text(text)

    def test_env_seed(self, monkeypatch):
        monkeypatch.delenv("TRAJDEN_SEED", raising=False)
        assert env_seed() == 0
        monkeypatch.setenv("TRAJDEN_SEED", "17")
        assert env_seed() == 17
        monkeypatch.setenv("TRAJDEN_SEED", "x")
        with pytest.raises(ConfigError):
            env_seed()


class TestPerturbation:
    def test_uniform_ranges(self):
        rng = np.random.default_rng(0)
        gt = Pose(10.0, -5.0, 3.0)
        draws = np.array([[p.x - gt.x, p.y - gt.y, math.remainder(p.theta - gt.theta, 2 * math.pi)]
                          for p in (perturb_pose(gt, TrainConfig(), rng) for _ in range(20000))])
        assert np.abs(draws[:, :2]).max() <= 30.0
        assert np.abs(draws[:, 2]).max() <= math.radians(30) + 1e-12
        # uniform on [-a, a]: mean 0, variance a^2 / 3
        assert np.all(np.abs(draws.mean(axis=0)) < [0.5, 0.5, 0.01])
        assert_allclose(draws.var(axis=0), [300.0, 300.0, math.radians(30) ** 2 / 3], rtol=0.03)

    def test_zero_range_is_identity(self):
        gt = Pose(1.0, 2.0, 0.5)
        cfg = TrainConfig(perturb_rot=0.0, perturb_trans=0.0)
        assert perturb_pose(gt, cfg, np.random.default_rng(1)) == gt

    def test_sample_frame(self, train_set):
        scn = train_set[0]
        s = training_sample(scn, TrainConfig(), np.random.default_rng(2), RasterCache(TrainConfig()))
        assert s.tile.shape == scn.tile.grid.shape
        assert s.obs is scn.obs.grid
        # the perturbed pose sits at the local origin
        q = s.gt.pose(scn.query_index)
        assert math.hypot(q.x, q.y) <= 30 * math.sqrt(2) + 1e-6

    def test_unperturbed_sample_is_gt_centred(self, train_set):
        scn = train_set[1]
        cfg = TrainConfig(perturb_rot=0.0, perturb_trans=0.0)
        s = training_sample(scn, cfg, np.random.default_rng(0), RasterCache(cfg))
        q = s.gt.pose(scn.query_index)
        assert_allclose([q.x, q.y, q.theta], [0.0, 0.0, scn.gt_pose.theta], atol=1e-9)
        assert_allclose(np.diff(s.gt.xy, axis=0), np.diff(scn.gt_traj.xy, axis=0), atol=1e-9)


class TestLoss:
    def test_components_sum(self, train_set):
        params = model.build_params(0)
        cfg = TrainConfig(alpha=0.7)
        _, c = total_loss(train_set[0], params, cfg, np.random.default_rng(4))
        assert c["l_total"] == pytest.approx(c["l_diff"] + 0.7 * c["l_loc"], rel=1e-6)
        assert c["l_diff"] > 0 and c["l_loc"] > 0

    def test_alpha_zero_drops_loc(self, train_set):
        params = model.build_params(0)
        _, c = total_loss(train_set[0], params, TrainConfig(alpha=0.0), np.random.default_rng(4))
        assert c["l_total"] == pytest.approx(c["l_diff"], rel=1e-7)

    def test_no_refinement_leaves_denoiser_alone(self, train_set):
        params = model.build_params(0)
        cfg = TrainConfig(ablation_mode="no_refinement")
        g, c = sample_grads(train_set[0], 0, 1, params, cfg, RasterCache(cfg), model.ModelConfig())
        assert c["l_diff"] == 0.0 and c["l_total"] == c["l_loc"]
        for name, arr in g.items():
            if name.startswith("den."):
                assert not np.any(arr)

    def test_nan_params_raise(self, train_set):
        params = model.build_params(0)
        for _, p in params:
            p.data[...] = np.nan
        cfg = TrainConfig()
        with pytest.raises(NumericalError):
            sample_grads(train_set[0], 0, 1, params, cfg, RasterCache(cfg), model.ModelConfig())

    def test_sample_rng_streams(self):
        a = sample_rng(TINY, 1, 0).random(4)
        assert np.array_equal(a, sample_rng(TINY, 1, 0).random(4))
        assert not np.array_equal(a, sample_rng(TINY, 1, 1).random(4))
        assert not np.array_equal(a, sample_rng(TINY, 2, 0).random(4))


@pytest.fixture(scope="module")
def run(train_set, tmp_path_factory):
    return train(train_set, TINY, tmp_path_factory.mktemp("run") / "m.ckpt")


class TestTrainLoop:
    def test_outputs(self, run):
        assert run.checkpoint.exists() and sidecar_path(run.checkpoint).exists()
        log = read_log(log_path_for(run.checkpoint))
        assert [r["epoch"] for r in log] == [1, 2]
        for r in log:
            assert r["l_total"] == pytest.approx(r["l_diff"] + r["l_loc"], rel=1e-6)
            assert r["grad_norm"] > 0
        params, meta, _ = load_model(run.checkpoint)
        assert meta["epoch"] == 2 and meta["config"]["batch"] == 2
        for n, p in run.params:
            assert np.array_equal(p.data, params[n].data)

    def test_bit_identical_rerun(self, run, train_set, tmp_path):
        again = train(train_set, TINY, tmp_path / "m.ckpt")
        assert again.checkpoint.read_bytes() == run.checkpoint.read_bytes()
        assert log_path_for(again.checkpoint).read_bytes() == log_path_for(run.checkpoint).read_bytes()

    def test_resume_matches_uninterrupted(self, run, train_set, tmp_path):
        out = tmp_path / "m.ckpt"
        train(train_set, replace(TINY, epochs=1), out)
        resumed = train(train_set, TINY, out, resume=True)
        assert [r["epoch"] for r in resumed.log] == [1, 2]
        assert out.read_bytes() == run.checkpoint.read_bytes()

    def test_resume_config_mismatch(self, run, train_set, tmp_path):
        out = tmp_path / "m.ckpt"
        for suffix in ("", ".json", ".log.csv"):
            (tmp_path / ("m.ckpt" + suffix)).write_bytes((run.checkpoint.parent / ("m.ckpt" + suffix)).read_bytes())
        with pytest.raises(ConfigError):
            train(train_set, replace(TINY, lr=1e-3), out, resume=True)

    def test_worker_count_invariant(self, run, train_set, tmp_path):
        two = train(train_set, replace(TINY, workers=2), tmp_path / "m.ckpt")
        a = load_checkpoint(two.checkpoint)
        b = load_checkpoint(run.checkpoint)
        for k in b:
            if k.startswith("__") or "workers" in k:
                continue
            assert np.array_equal(a[k], b[k]), k

    def test_no_refinement_freezes_denoiser(self, train_set, tmp_path):
        cfg = replace(TINY, ablation_mode="no_refinement", epochs=1)
        res = train(train_set, cfg, tmp_path / "m.ckpt")
        init = model.build_params(cfg.seed)
        for n, p in res.params:
            same = np.array_equal(p.data, init[n].data)
            if n.startswith("den."):
                assert same, n
            elif n.startswith(("bev.", "map.")):
                assert not same, n

    def test_too_few_scenarios(self, train_set, tmp_path):
        with pytest.raises(ConfigError):
            train(train_set[:1], TINY, tmp_path / "m.ckpt")

    def test_loss_decreases_when_overfitting(self, train_set, tmp_path):
        cfg = TrainConfig(lr=1e-3, batch=4, epochs=8, ablation_mode="no_refinement")
        log = train(train_set, cfg, tmp_path / "m.ckpt").log
        first = np.mean([r["l_loc"] for r in log[:2]])
        last = np.mean([r["l_loc"] for r in log[-2:]])
        assert last < 0.8 * first
