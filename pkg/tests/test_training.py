"""Losses and the training loop."""

import math

import numpy as np
import pytest

from fimp import training as tr
from fimp.acceptutil import reduced_config
from fimp.config import TrainConfig
from fimp.diffcore import Tensor, using_dtype
from fimp.errors import ConfigError, NonFiniteError
from fimp.futuredec import PredictionSet
from fimp.scenariogen import generate_dataset


def pred_set(locations, scales=None, d=None, conf=None):
    locations = np.asarray(locations, dtype=float)
    m = locations.shape[0]
    scales = np.ones_like(locations) if scales is None else scales
    d = np.zeros(m) if d is None else d
    conf = np.full(m, 1.0 / m) if conf is None else conf
    return PredictionSet(locations, scales, d, conf)


class TestWtaSelect:
    def test_exact_mode_wins(self):
        truth = np.cumsum(np.ones((5, 2)) * 0.5, axis=0)
        modes = np.stack([truth + 3.0, truth, truth - 1.0])
        assert tr.wta_select(pred_set(modes), truth) == 1

    def test_ties_prefer_lower_index(self):
        truth = np.zeros((4, 2))
        modes = np.stack([truth + 1.0, truth + 1.0])
        assert tr.wta_select(pred_set(modes), truth) == 0

    def test_matches_brute_force_ade(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m, t = int(rng.integers(1, 7)), int(rng.integers(2, 31))
            locations = rng.normal(size=(m, t, 2)) * 5
            truth = rng.normal(size=(t, 2)) * 5
            ades = [np.mean([math.dist(locations[k, i], truth[i])
                             for i in range(t)]) for k in range(m)]
            assert tr.wta_select(pred_set(locations), truth) == int(np.argmin(ades))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        locations = rng.normal(size=(3, 6, 2))
        truth = rng.normal(size=(6, 2))
        a = tr.wta_select(pred_set(locations), truth)
        b = tr.wta_select(pred_set(locations, scales=np.full((3, 6, 2), 9.0)),
                          truth)
        assert a == b

    def test_missing_truth_rejected(self):
        truth = np.zeros((4, 2))
        truth[2] = np.nan
        with pytest.raises(NonFiniteError):
            tr.wta_select(pred_set(np.zeros((2, 4, 2))), truth)


class TestLaplaceNll:
    def test_perfect_prediction_half_scale(self):
        with using_dtype(np.float64):
            g = np.ones((5, 2))
            nll = tr.laplace_nll(Tensor(g), Tensor(np.full((5, 2), 0.5)), g)
        assert float(nll.data) == pytest.approx(0.0, abs=1e-12)

    def test_unit_scale_two_log_two(self):
        with using_dtype(np.float64):
            g = np.random.default_rng(2).normal(size=(7, 2))
            nll = tr.laplace_nll(Tensor(g), Tensor(np.ones((7, 2))), g)
        assert float(nll.data) == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_gradient_is_signed_reciprocal_scale(self):
        with using_dtype(np.float64):
            g = np.zeros((3, 2))
            mu = Tensor(np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 0.25]]),
                        requires_grad=True)
            b = np.full((3, 2), 2.0)
            nll = tr.laplace_nll(mu, Tensor(b), g)
            nll.backward()
            expected = -np.sign(g - mu.data) / b / 3.0  # mean over 3 rows
            np.testing.assert_allclose(mu.grad, expected, atol=1e-12)

    def test_non_positive_scale_rejected(self):
        with pytest.raises(ValueError):
            tr.laplace_nll(Tensor(np.zeros((2, 2))),
                           Tensor(np.zeros((2, 2))), np.zeros((2, 2)))


class TestClassificationLoss:
    def test_exact_estimates_zero_loss(self):
        endpoints = np.array([[[3.0, 4.0]], [[0.0, 1.0]]])  # [M=2, N=1, 2]
        truth_end = np.zeros((1, 2))
        d = Tensor(np.array([[5.0], [1.0]]))  # equals actual errors
        loss = tr.classification_loss(d, endpoints, truth_end)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_smooth_l1_branches(self):
        assert tr.smooth_l1(Tensor(np.array([0.5]))).item() == \
            pytest.approx(0.125, abs=1e-7)
        assert tr.smooth_l1(Tensor(np.array([2.0]))).item() == \
            pytest.approx(1.5, abs=1e-7)
        assert tr.smooth_l1(Tensor(np.array([-1.0]))).item() == \
            pytest.approx(0.5, abs=1e-7)


class TestSceneLoss:
    def _setup(self, seed=0):
        from fimp.acceptutil import toy_scene
        from fimp.model import FimpModel, build_scene_inputs
        cfg = reduced_config()
        model = FimpModel(cfg, init_seed=seed)
        si = build_scene_inputs(toy_scene(3, 2, seed=seed), cfg)
        out = model.forward(si)
        return out, si

    def test_total_is_exact_sum(self):
        out, si = self._setup()
        loss, report = tr.scene_loss(out, si)
        assert report.total == report.regression + report.classification
        assert float(loss.data) == pytest.approx(report.total, rel=1e-6)

    def test_best_mode_matches_wta_oracle(self):
        out, si = self._setup(1)
        _, report = tr.scene_loss(out, si)
        mu = out.mu.data.transpose(2, 1, 0, 3)  # [N, M, T, 2]
        for n in range(si.num_agents):
            oracle = tr.wta_select(
                pred_set(mu[n]), si.truth_agent[n].astype(mu.dtype))
            assert report.best_mode[n] == oracle

    def test_agents_without_future_excluded(self):
        out, si = self._setup(2)
        si.truth_valid[:] = False
        loss, report = tr.scene_loss(out, si)
        assert loss is None
        assert (report.best_mode == -1).all()


class TestConfig:
    def test_reference_defaults(self):
        cfg = TrainConfig()
        assert cfg.feature_dim == 128
        assert cfg.heads == 8
        assert cfg.modes == 6
        assert cfg.zones == 5
        assert cfg.topk == 10
        assert (cfg.agent_radius, cfg.lane_radius, cfg.future_lane_radius) == \
            (50.0, 50.0, 100.0)
        assert cfg.lane_layers == 1 and cfg.agent_layers == 3
        assert cfg.temporal_layers == 4
        assert cfg.lr == 0.0005
        assert cfg.weight_decay == 0.0001
        assert cfg.dropout == 0.1
        assert cfg.batch_size == 32
        assert cfg.epochs == 64

    def test_file_round_trip(self, tmp_path):
        from fimp.config import load_config, save_config
        cfg = TrainConfig(feature_dim=64, heads=4, zones=6, epochs=10)
        path = tmp_path / "c.cfg"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("feature_dim = 64\nwarp_speed = 9\n")
        with pytest.raises(ConfigError, match="warp_speed"):
            from fimp.config import load_config
            load_config(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(zones=7)  # does not divide 30
        with pytest.raises(ConfigError):
            TrainConfig(feature_dim=30, heads=4)
        with pytest.raises(ConfigError):
            TrainConfig(strategy="psychic")

    def test_overrides(self):
        from fimp.config import parse_overrides
        cfg = parse_overrides(["topk=5", "strategy=nearest_order", "lr=0.001",
                               "use_future_al=false"])
        assert cfg.topk == 5 and cfg.strategy == "nearest_order"
        assert cfg.lr == 0.001 and cfg.use_future_al is False
        with pytest.raises(ConfigError):
            parse_overrides(["nope=1"])


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    generate_dataset({"yield": 3, "independent": 2}, seed=21, out_dir=out,
                     noise=0.0, agent_range=(3, 4))
    return out


def overfit_config(**kw):
    base = dict(feature_dim=16, heads=2, modes=2, zones=3, t_future=30,
                temporal_layers=1, lane_layers=1, agent_layers=1,
                future_lane_layers=1, future_agent_layers=1, zone_attn_layers=1,
                dropout=0.1, lr=0.002, batch_size=2, epochs=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_fixed_seed_reproduces_loss_sequence(self, tiny_dataset, tmp_path):
        cfg = overfit_config()
        r1 = tr.train(cfg, tiny_dataset, tmp_path / "a", quiet=True)
        r2 = tr.train(cfg, tiny_dataset, tmp_path / "b", quiet=True)
        l1 = [row["train_loss"] for row in r1.history]
        l2 = [row["train_loss"] for row in r2.history]
        assert l1 == l2

    def test_metrics_csv_schema(self, tiny_dataset, tmp_path):
        cfg = overfit_config(epochs=2)
        res = tr.train(cfg, tiny_dataset, tmp_path / "run", quiet=True)
        with open(res.log_path) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_minADE,val_minFDE"
        assert len(lines) == 3

    def test_checkpoint_resume_continues_losses(self, tiny_dataset, tmp_path):
        cfg = overfit_config(epochs=4, dropout=0.1)
        full = tr.train(cfg, tiny_dataset, tmp_path / "full2", quiet=True)

        # stop after two epochs on the same schedule, resume to the end
        steps_per_epoch = 2  # 4 train scenes / batch_size 2
        first = tr.train(cfg, tiny_dataset, tmp_path / "stage1", quiet=True,
                         max_steps=2 * steps_per_epoch)
        assert len(first.history) == 2
        resumed = tr.train(cfg, tiny_dataset, tmp_path / "stage2",
                           resume=first.checkpoint, quiet=True)
        got = [r["train_loss"] for r in resumed.history]
        want = [r["train_loss"] for r in full.history[2:]]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_non_finite_loss_aborts_with_scene_ids(self, tiny_dataset, tmp_path):
        cfg = overfit_config(epochs=1)
        ds = tr.SceneDataset.from_path(tiny_dataset)
        sab = tr.SceneDataset(list(ds.scenes.values()), ds.labels)
        first = sab.train_ids[0]
        si = sab.inputs(first, cfg)
        si.motion[:] = np.nan  # poisoned cached inputs
        si.motion_pad[:] = False
        with pytest.raises(NonFiniteError):
            tr.train(cfg, sab, tmp_path / "bad", quiet=True)
