import numpy as np
import pytest

from affectconv import models, neural
from affectconv.models import (
    CheckpointError,
    TrainConfig,
    build_dilated_net,
    build_downup_net,
    load_checkpoint,
    predict_array,
    predict_ensemble,
    save_checkpoint,
    train,
)
from affectconv.neural import LayerKind, receptive_field
from affectconv.seqio import Sequence, SyntheticSpec, generate_synthetic, split_partitions

from helpers import fd_gradient, max_rel_err


def _conv_layers(spec, kind):
    return [l for l in spec.layers if l.kind is kind]


class TestBuilders:
    def test_dilated_defaults(self):
        spec = build_dilated_net(16)
        convs = _conv_layers(spec, LayerKind.CONV)
        assert len(convs) == 10
        assert [l.dilation for l in convs] == [2**n for n in range(10)]
        assert spec.layers[-1].kind is LayerKind.HEAD and spec.layers[-1].out_ch == 1
        assert receptive_field(spec) == 2047

    def test_dilated_depth_one(self):
        assert receptive_field(build_dilated_net(4, depth=1, k=3)) == 3

    @pytest.mark.parametrize("k, depth", [(2, 4), (5, 3), (3, 6)])
    def test_receptive_field_formula(self, k, depth):
        assert receptive_field(build_dilated_net(2, width=3, depth=depth, k=k)) == 1 + (k - 1) * (2**depth - 1)

    def test_parameters_linear_in_depth(self):
        counts = [build_dilated_net(16, depth=d).n_parameters() for d in range(1, 8)]
        steps = np.diff(counts)
        assert np.all(steps == steps[0]) and steps[0] == 32 * 32 * 3 + 32

    def test_downup_81_frames(self):
        spec = build_downup_net(3, width=4)
        params = neural.init_parameters(spec, 0)
        x = np.random.default_rng(0).normal(size=(3, 81))
        out, caches = models.network_forward(spec, params, x)
        pool_inputs = [c[1] for l, c in zip(spec.layers, caches) if l.kind is LayerKind.MAXPOOL]
        tconv_inputs = [c.shape[1] for l, c in zip(spec.layers, caches) if l.kind is LayerKind.TCONV]
        assert spec.pad_multiple == 81
        assert pool_inputs == [81, 27, 9, 3]
        assert tconv_inputs == [1, 3, 9, 27]
        assert out.shape == (1, 81)

    def test_pool_one_is_plain_conv_stack(self):
        spec = build_downup_net(2, width=3, pool=1)
        assert spec.pad_multiple == 1
        params = neural.init_parameters(spec, 1)
        x = np.random.default_rng(1).normal(size=(2, 17))
        y, _ = models.network_forward(spec, params, x)
        assert y.shape == (1, 17)
        # pool of one passes values through unchanged
        pool_layers = _conv_layers(spec, LayerKind.MAXPOOL)
        assert all(l.stride_or_pool == 1 for l in pool_layers)

    def test_valence_width(self):
        narrow, wide = build_downup_net(160, width=32), build_downup_net(160, width=128)
        pairs = lambda s: [l.in_ch * l.out_ch for l in s.layers if l.kind in (LayerKind.CONV, LayerKind.TCONV)][1:]
        assert all(b == 16 * a for a, b in zip(pairs(narrow), pairs(wide)))

    @pytest.mark.parametrize("kwargs", [dict(in_ch=0), dict(in_ch=2, width=0), dict(in_ch=2, depth=0)])
    def test_invalid_dims(self, kwargs):
        with pytest.raises(ValueError):
            build_dilated_net(**kwargs)


class TestForward:
    @pytest.mark.parametrize("builder", [lambda: build_dilated_net(2, width=2), lambda: build_downup_net(2, width=2)])
    def test_length_identity_sweep(self, builder):
        spec = builder()
        params = neural.init_parameters(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1000))
        for t in range(1, 1001):
            assert predict_array(spec, params, x[:, :t]).shape == (t,)

    def test_full_length_utterance(self):
        feats = Sequence(np.random.default_rng(0).normal(size=(4, 7499)), 25.0)
        for spec in (build_dilated_net(4, width=2), build_downup_net(4, width=2)):
            out = models.forward_full(spec, neural.init_parameters(spec, 0), feats)
            assert out.frames == 7499 and out.channels == 1

    def test_zero_weights_give_bias(self):
        spec = build_downup_net(3, width=4)
        params = {k: np.zeros_like(v) for k, v in neural.init_parameters(spec, 0).items()}
        head = f"layer{len(spec.layers) - 1:02d}.bias"
        params[head][:] = 0.7
        y = predict_array(spec, params, np.random.default_rng(0).normal(size=(3, 100)))
        np.testing.assert_array_equal(y, np.full(100, 0.7))

    def test_channel_mismatch(self):
        spec = build_dilated_net(4, width=2, depth=2)
        with pytest.raises(ValueError, match="expects 4 .* have 3"):
            predict_array(spec, neural.init_parameters(spec, 0), np.zeros((3, 10)))


class TestNetworkGradient:
    def _check(self, spec, frames, seed):
        rng = np.random.default_rng(seed)
        params = neural.init_parameters(spec, seed)
        for v in params.values():
            v += rng.normal(0, 0.1, v.shape)
        x = rng.normal(size=(spec.in_ch, frames))
        y = rng.normal(size=frames)
        _, grads = models._loss_and_grads(spec, params, x, y)

        def loss_for(name):
            def f(value):
                trial = dict(params)
                trial[name] = value
                return models._loss_and_grads(spec, trial, x, y)[0]

            return f

        for name, p in params.items():
            assert max_rel_err(grads[name], fd_gradient(loss_for(name), p)) <= 1e-5, name

    def test_tiny_dilated(self):
        self._check(build_dilated_net(2, width=4, depth=3), 30, 0)

    def test_tiny_downup(self):
        self._check(build_downup_net(2, width=3, pool=3, down_layers=1, up_layers=1), 27, 1)

    def test_input_gradient(self):
        spec = build_dilated_net(2, width=3, depth=2)
        params = neural.init_parameters(spec, 2)
        rng = np.random.default_rng(2)
        x, c = rng.normal(size=(2, 20)), rng.normal(size=(1, 20))
        out, caches = models.network_forward(spec, params, x)
        _, dx = models.network_backward(spec, params, caches, c)
        fd = fd_gradient(lambda v: float(np.sum(models.network_forward(spec, params, v)[0] * c)), x)
        assert max_rel_err(dx, fd) <= 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = build_downup_net(3, width=4)
        params = neural.init_parameters(spec, 5, np.float32)
        save_checkpoint(tmp_path / "m.dnet", spec, params, seed=5, epoch=7)
        ck = load_checkpoint(tmp_path / "m.dnet")
        assert ck.spec == spec and (ck.seed, ck.epoch) == (5, 7)
        for k in params:
            np.testing.assert_array_equal(ck.params[k], params[k])
        assert not (tmp_path / "m.dnet.tmp").exists()

    def test_truncated(self, tmp_path):
        spec = build_dilated_net(2, width=2, depth=2)
        save_checkpoint(tmp_path / "m.dnet", spec, neural.init_parameters(spec, 0))
        raw = (tmp_path / "m.dnet").read_bytes()
        (tmp_path / "m.dnet").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="payload length mismatch"):
            load_checkpoint(tmp_path / "m.dnet")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.dnet").write_bytes(b'{"magic": "DSEQ1"}\n')
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.dnet")

    def test_wrong_names(self, tmp_path):
        spec = build_dilated_net(2, width=2, depth=2)
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "m.dnet", spec, {"w": np.zeros(1)})


def _tiny_dataset(rule="identity", noise=0.0, n=6, frames=300, seed=0, dims=2):
    spec = SyntheticSpec(
        n_utterances=n, frames=frames, feature_dims=dims, feature_rule=rule, noise_std=noise, seed=seed, max_delay_s=0.4
    )
    return split_partitions(generate_synthetic(spec), (1 / 3, 1 / 3, 1 / 3))


class TestTrain:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=5, max_epochs=5)
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1})
        assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)

    def test_identity_task(self):
        ds = _tiny_dataset()
        report = train(build_dilated_net(2, width=8, depth=4), ds, TrainConfig(max_epochs=50, patience=10))
        assert report.best_dev_ccc >= 0.95
        assert len(report.epochs) <= 50

    def test_patience_zero(self):
        ds = _tiny_dataset(rule="lifted", noise=2.0)
        report = train(build_dilated_net(2, width=2, depth=2), ds, TrainConfig(max_epochs=40, patience=0, lr=3e-2))
        cccs = [e.dev_ccc for e in report.epochs]
        first_bad = next(i for i in range(1, len(cccs)) if cccs[i] <= max(cccs[:i]))
        assert len(cccs) == first_bad + 1

    def test_best_is_max_and_checkpoint_written(self, tmp_path):
        ds = _tiny_dataset()
        report = train(build_dilated_net(2, width=2, depth=2), ds, TrainConfig(max_epochs=6, patience=2), tmp_path / "b.dnet")
        assert report.best_dev_ccc == max(e.dev_ccc for e in report.epochs)
        ck = load_checkpoint(tmp_path / "b.dnet")
        assert ck.epoch == report.best_epoch
        lines = report.to_csv().split("\r\n")
        assert lines[0] == "epoch,train_loss,dev_ccc,dev_rmse" and len(lines) == len(report.epochs) + 2

    def test_deterministic(self):
        ds = _tiny_dataset(rule="lifted", noise=0.5)
        cfg = TrainConfig(max_epochs=4, patience=2, seed=9)
        a = train(build_downup_net(2, width=3, down_layers=2, up_layers=2), ds, cfg)
        b = train(build_downup_net(2, width=3, down_layers=2, up_layers=2), ds, cfg)
        assert a.epochs == b.epochs and a.best_epoch == b.best_epoch
        for k in a.best_params:
            assert a.best_params[k].tobytes() == b.best_params[k].tobytes()

    def test_empty_partition(self):
        ds = split_partitions(generate_synthetic(SyntheticSpec(n_utterances=2, frames=50, feature_dims=2, ratios=(1, 0, 0))), (1, 0, 0))
        with pytest.raises(ValueError):
            train(build_dilated_net(2, width=2, depth=1), ds, TrainConfig(max_epochs=2, patience=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        ds = _tiny_dataset()
        with pytest.raises(models.TrainingDiverged):
            train(build_dilated_net(2, width=2, depth=1), ds, TrainConfig(max_epochs=3, patience=1, lr=np.inf))


class TestEnsemble:
    def test_single_matches_forward(self):
        spec = build_dilated_net(2, width=3, depth=2)
        ck = models.Checkpoint(spec, neural.init_parameters(spec, 0, np.float32))
        feats = Sequence(np.random.default_rng(0).normal(size=(2, 40)), 25.0)
        assert predict_ensemble([ck], feats) == models.forward_full(spec, ck.params, feats)

    def test_opposite_outputs_cancel(self):
        spec = build_dilated_net(2, width=3, depth=2)
        p = neural.init_parameters(spec, 0)
        head = len(spec.layers) - 1
        q = dict(p)
        q[f"layer{head:02d}.weight"] = -p[f"layer{head:02d}.weight"]
        feats = Sequence(np.random.default_rng(0).normal(size=(2, 40)), 25.0)
        out = predict_ensemble([models.Checkpoint(spec, p), models.Checkpoint(spec, q)], feats)
        np.testing.assert_allclose(out.data, 0, atol=1e-7)

    def test_spec_mismatch(self):
        a, b = build_dilated_net(2, width=3, depth=2), build_dilated_net(2, width=4, depth=2)
        cks = [models.Checkpoint(s, neural.init_parameters(s, 0)) for s in (a, b)]
        with pytest.raises(CheckpointError):
            predict_ensemble(cks, Sequence(np.zeros((2, 5)), 25.0))
        with pytest.raises(ValueError):
            predict_ensemble([], Sequence(np.zeros((2, 5)), 25.0))

    @pytest.mark.slow
    def test_five_seed_ensemble(self):
        ds = _tiny_dataset(rule="lifted", noise=1.0, n=9, frames=600, dims=4)
        spec = build_dilated_net(4, width=8, depth=5)
        singles, cks = [], []
        for seed in range(5):
            rep = train(spec, ds, TrainConfig(max_epochs=30, patience=5, seed=seed))
            singles.append(rep.best_dev_ccc)
            cks.append(models.Checkpoint(spec, rep.best_params, seed))
        preds = [predict_ensemble(cks, u.features).data[0] for u in ds.dev]
        ens, _ = models.score([u.labels.data[0] for u in ds.dev], preds)
        assert ens >= max(singles) - 0.02
