"""Tests for the autodiff core, layers, networks, optimiser, training and weight files."""

import numpy as np
import pytest

from sphmicro import model, sph
from sphmicro.nn import (
    MLP,
    SCNN,
    Adam,
    Estimator,
    Graph,
    MLPConfig,
    Parameter,
    SCNNConfig,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_source,
    global_avg_pool,
    load_weights,
    make_network,
    mlp_forward,
    network_inputs,
    save_weights,
    scnn_forward,
    sconv_layer,
    signal_relu,
    step_schedule,
    train,
)
from sphmicro.nn import autodiff, ops
from sphmicro.nn.networks import grid_transform
from sphmicro.nn.weights import read_manifest

from helpers import check_gradients, check_network_gradients, clear_of_kinks, projected


@pytest.fixture(scope="module")
def hardi():
    return model.load_scheme("hardi")


@pytest.fixture(scope="module")
def realistic_inputs(hardi):
    """Noiseless HARDI shell expansions, sCNN layout ``(N, 2, 45)``."""
    sig, _, _ = model.Simulator(hardi, "2c", snr=np.inf, seed=3).batch(0, 6)
    return network_inputs("scnn", sig, hardi)


class TestAutodiff:
    def test_square(self):
        g = Graph()
        x = Parameter(np.array(3.0))
        g.backward(autodiff.mul(g, x, x))
        assert x.grad == 6.0

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError, match="before any forward"):
            Graph().backward(autodiff.Node(np.array(1.0)))

    def test_backward_twice(self):
        g = Graph()
        x = Parameter(np.array(2.0))
        loss = autodiff.mul(g, x, x)
        g.backward(loss)
        with pytest.raises(RuntimeError):
            g.backward(loss)

    def test_foreign_and_vector_loss(self):
        g1, g2 = Graph(), Graph()
        x = Parameter(np.ones(3))
        y = autodiff.total(g1, x)
        g2.constant(1.0)
        with pytest.raises(ValueError, match="does not belong"):
            g2.backward(y)
        v = autodiff.add(g1, x, x)
        with pytest.raises(ValueError, match="scalar"):
            g1.backward(v)

    def test_shared_node_accumulates(self):
        g = Graph()
        x = Parameter(np.array([1.0, -2.0]))
        y = autodiff.add(g, x, x)
        loss = autodiff.total(g, autodiff.mul(g, y, x))  # 2 x^2
        g.backward(loss)
        np.testing.assert_allclose(x.grad, 4 * x.value)

    def test_gradients_not_accumulated_across_graphs(self):
        x = Parameter(np.array(3.0))
        for _ in range(2):
            g = Graph()
            g.backward(autodiff.mul(g, x, x))
        assert x.grad == 6.0

    def test_parameters_in_first_use_order(self):
        g = Graph()
        a, b = Parameter(np.ones(2), "a"), Parameter(np.ones(2), "b")
        autodiff.add(g, b, a)
        assert [p.name for p in g.parameters()] == ["b", "a"]


class TestLayerGradients:
    def test_linear(self):
        rng = np.random.default_rng(0)
        proj = rng.standard_normal((5, 3))
        check_gradients(lambda g, p: projected(g, ops.linear(g, p["x"], p["w"], p["b"]), proj),
                        {"x": rng.standard_normal((5, 4)), "w": rng.standard_normal((4, 3)),
                         "b": rng.standard_normal(3)}, rng)

    def test_relu(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 5))
        x[np.abs(x) < 0.01] = 0.5  # keep finite differences away from the kink
        proj = rng.standard_normal((6, 5))
        check_gradients(lambda g, p: projected(g, ops.relu(g, p["x"]), proj), {"x": x}, rng)

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, training):
        rng = np.random.default_rng(2)
        proj = rng.standard_normal((8, 4))
        state = {"mean": rng.standard_normal(4), "var": rng.uniform(0.5, 2, 4)}

        def build(g, p):
            s = {k: v.copy() for k, v in state.items()}
            return projected(g, ops.batchnorm(g, p["x"], p["gamma"], p["beta"], s, training), proj)

        check_gradients(build, {"x": rng.standard_normal((8, 4)), "gamma": rng.uniform(0.5, 2, 4),
                                "beta": rng.standard_normal(4)}, rng)

    def test_batchnorm_running_stats(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((16, 3)) * 2 + 1
        state = {"mean": np.zeros(3), "var": np.ones(3)}
        g = Graph()
        p = {k: Parameter(v) for k, v in {"gamma": np.ones(3), "beta": np.zeros(3)}.items()}
        out = ops.batchnorm(g, g.constant(x), p["gamma"], p["beta"], state, True)
        np.testing.assert_allclose(state["mean"], 0.1 * x.mean(0))
        np.testing.assert_allclose(state["var"], 0.9 + 0.1 * x.var(0, ddof=1))
        np.testing.assert_allclose(out.value.mean(0), 0, atol=1e-12)

    def test_mse(self):
        rng = np.random.default_rng(4)
        target = rng.standard_normal((5, 2))
        check_gradients(lambda g, p: ops.mse(g, p["x"], target),
                        {"x": rng.standard_normal((5, 2))}, rng)

    def test_sconv(self):
        rng = np.random.default_rng(5)
        proj = rng.standard_normal((153, 3, 4))
        check_gradients(lambda g, p: projected(g, ops.sconv(g, p["x"], p["w"], 16), proj),
                        {"x": rng.standard_normal((45, 3, 2)), "w": rng.standard_normal((9, 2, 4))},
                        rng)

    def test_sphere_relu(self, realistic_inputs):
        rng = np.random.default_rng(6)
        t = grid_transform("gauss", 16, 16, "float64")
        x = np.zeros((153, 3, 2))
        x[:45] = realistic_inputs[:3].transpose(2, 0, 1)
        x[45:] = 0.001 * rng.standard_normal((108, 3, 2))
        x = clear_of_kinks(x, t)
        proj = rng.standard_normal(x.shape)
        check_gradients(lambda g, p: projected(g, ops.sphere_relu(g, p["x"], t), proj), {"x": x},
                        rng, n_check=30)

    def test_sphere_relu_input_transform(self, realistic_inputs):
        rng = np.random.default_rng(60)
        t = grid_transform("gauss", 16, 16, "float64")
        t8 = grid_transform("gauss", 16, 8, "float64")
        x = np.zeros((153, 3, 2))
        x[:45] = realistic_inputs[:3].transpose(2, 0, 1)
        x = clear_of_kinks(x, t)
        proj = rng.standard_normal(x.shape)
        check_gradients(lambda g, p: projected(g, ops.sphere_relu(g, p["x"], t, in_transform=t8),
                                               proj), {"x": x}, rng, n_check=30)
        g = Graph()
        full = ops.sphere_relu(g, g.constant(x), t).value
        reduced = ops.sphere_relu(g, g.constant(x), t, in_transform=t8).value
        np.testing.assert_allclose(reduced, full, rtol=0, atol=1e-12)

    def test_sphere_relu_input_transform_checked(self):
        t8 = grid_transform("gauss", 16, 8, "float64")
        t_other = grid_transform("gauss", 8, 8, "float64")
        g = Graph()
        with pytest.raises(ValueError, match="share the grid"):
            ops.sphere_relu(g, g.constant(np.zeros((153, 1, 1))), t_other, in_transform=t8)

    def test_sphere_relu_pool(self, realistic_inputs):
        rng = np.random.default_rng(7)
        t = grid_transform("gauss", 16, 16, "float64")
        x = np.zeros((153, 3, 2))
        x[:45] = realistic_inputs[:3].transpose(2, 0, 1)
        x = clear_of_kinks(x, t)
        proj = rng.standard_normal((3, 2))
        check_gradients(lambda g, p: projected(g, ops.sphere_relu_pool(g, p["x"], t), proj),
                        {"x": x}, rng, n_check=30)

    def test_dc_pool(self):
        rng = np.random.default_rng(8)
        proj = rng.standard_normal((3, 2))
        check_gradients(lambda g, p: projected(g, ops.dc_pool(g, p["x"]), proj),
                        {"x": rng.standard_normal((45, 3, 2))}, rng)

    def test_pooled_feature_ignores_l2(self):
        g = Graph()
        x = Parameter(np.random.default_rng(9).standard_normal((45, 2, 3)))
        g.backward(autodiff.total(g, ops.dc_pool(g, x)))
        l2 = slice(1, 6)
        np.testing.assert_allclose(x.grad[l2], 0, atol=1e-12)

    @pytest.mark.parametrize("arch", ["pa-mlp", "reg-mlp"])
    def test_mlp_loss(self, hardi, arch):
        rng = np.random.default_rng(10)
        net = make_network(arch, hardi, "2c", seed=1, dtype=np.float64)
        sig, par, _ = model.Simulator(hardi, "2c", snr=30, seed=2).batch(0, 8)
        x = network_inputs(arch, sig, hardi)
        y = par * model.TARGET_SCALE["2c"]
        check_network_gradients(net, x, y, rng, 30)

    def test_full_scnn_loss(self, hardi):
        rng = np.random.default_rng(11)
        net = make_network("scnn", hardi, "2c", seed=2, dtype=np.float64)
        sig, par, _ = model.Simulator(hardi, "2c", snr=30, seed=4).batch(0, 6)
        x = network_inputs("scnn", sig, hardi)
        y = par * model.TARGET_SCALE["2c"]
        check_network_gradients(net, x, y, rng, 50)



class TestFunctionalLayers:
    def test_identity_filter(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 1, 45))
        ls = np.arange(0, 17, 2)
        filt = (np.sqrt((2 * ls + 1) / (4 * np.pi)) / (2 * np.pi))[None, None, :]
        out = sconv_layer(x, filt)
        assert out.shape == (3, 1, 153)
        np.testing.assert_allclose(out[..., :45], x, atol=1e-13)
        np.testing.assert_array_equal(out[..., 45:], 0)

    def test_zero_filters(self):
        x = np.random.default_rng(13).standard_normal((2, 3, 153))
        np.testing.assert_array_equal(sconv_layer(x, np.zeros((3, 4, 9))), 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sconv_layer(np.zeros((2, 3, 45)), np.zeros((2, 4, 9)))

    def test_sconv_equivariant(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 45))
        filt = rng.standard_normal((2, 3, 9))
        rot = sph.random_rotations(rng, 1)[0]
        lhs = sconv_layer(sph.rotate_sh(x, rot), filt)
        rhs = sph.rotate_sh(sconv_layer(x, filt), rot)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_relu_positive_input(self):
        rng = np.random.default_rng(15)
        c = 0.002 * rng.standard_normal((4, 153))
        c[:, 0] = 5.0
        assert np.all(sph.isft(c, sph.fibonacci_directions(2000)) > 0)
        np.testing.assert_allclose(signal_relu(c), c, atol=1e-9)

    def test_relu_negative_input(self):
        rng = np.random.default_rng(16)
        c = 0.002 * rng.standard_normal((4, 153))
        c[:, 0] = -5.0
        np.testing.assert_allclose(signal_relu(c), 0, atol=1e-12)

    def test_relu_equiangular_grid(self):
        c = np.zeros(45)
        c[0] = 2.0
        np.testing.assert_allclose(signal_relu(c, grid="equiangular"), c, atol=1e-9)

    def test_pool_isotropic(self):
        c = np.zeros((3, 153))
        c[:, 0] = np.array([0.5, -1.0, 2.0]) * np.sqrt(4 * np.pi)
        np.testing.assert_allclose(global_avg_pool(c), [0.5, -1.0, 2.0], atol=1e-12)

    def test_pool_pure_l2(self):
        c = np.zeros((5, 153))
        c[:, 1:6] = np.random.default_rng(17).standard_normal((5, 5))
        np.testing.assert_allclose(global_avg_pool(c), 0, atol=1e-10)

    def test_pool_is_dc(self):
        c = np.random.default_rng(18).standard_normal((6, 153))
        np.testing.assert_allclose(global_avg_pool(c), c[:, 0] / np.sqrt(4 * np.pi), atol=1e-10)


class TestNetworks:
    @pytest.mark.parametrize("arch,kind,expected", [
        ("scnn", "2c", 48_930), ("reg-mlp", "2c", 164_610), ("pa-mlp", "2c", 134_402),
        ("sh-mlp", "2c", 212_226),
    ])
    def test_param_counts_hardi(self, hardi, arch, kind, expected):
        assert make_network(arch, hardi, kind).count_params() == expected

    def test_param_count_8_shell(self):
        assert SCNN(SCNNConfig(in_channels=8, n_out=4)).count_params() == 50_052

    def test_zero_weights_zero_output(self):
        net = MLP(MLPConfig(n_in=5))
        for p in net.parameters():
            p.value[...] = 0
        out = mlp_forward(net, np.random.default_rng(19).standard_normal((4, 5)))
        np.testing.assert_array_equal(out, 0)

    def test_nan_names_layer(self):
        net = MLP(MLPConfig(n_in=3))
        with pytest.raises(FloatingPointError, match="fc0"):
            net.predict(np.array([[1.0, np.nan, 0.0]]))
        scnn = SCNN(SCNNConfig(in_channels=1))
        x = np.zeros((1, 1, 45))
        x[0, 0, 3] = np.inf
        with pytest.raises(FloatingPointError, match="conv0"):
            scnn_forward(scnn, x)

    def test_input_shape_checked(self):
        with pytest.raises(ValueError, match="expects input"):
            SCNN(SCNNConfig(in_channels=2)).predict(np.zeros((1, 3, 45)))
        with pytest.raises(ValueError, match="expects input"):
            MLP(MLPConfig(n_in=2)).predict(np.zeros((1, 3)))

    def test_inference_pure(self, realistic_inputs):
        net = SCNN(SCNNConfig(in_channels=2), seed=5)
        np.testing.assert_array_equal(net.predict(realistic_inputs), net.predict(realistic_inputs))

    def test_batch_independent(self, realistic_inputs):
        net = SCNN(SCNNConfig(in_channels=2), seed=5)
        full = net.predict(realistic_inputs)
        np.testing.assert_allclose(net.predict(realistic_inputs, batch_size=2), full, rtol=1e-5,
                                   atol=1e-6)

    def test_untrained_rotation_spread(self, hardi):
        net = make_network("scnn", hardi, "2c", seed=0)
        cfg = model.sample_config_2c(np.random.default_rng(20), 4)
        rots = sph.random_rotations(np.random.default_rng(21), 12)
        preds = []
        for r in rots:
            sig = model.synth_signal(cfg.with_odf(sph.rotate_sh(cfg.odf, r)), hardi)
            preds.append(net.predict(network_inputs("scnn", sig, hardi)))
        spread = np.ptp(np.stack(preds), axis=0).max()
        assert spread <= 1e-2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SCNNConfig(in_channels=0)
        with pytest.raises(ValueError):
            SCNNConfig(in_channels=1, in_lmax=18)
        with pytest.raises(ValueError):
            MLPConfig(n_in=0)

    def test_astype_preserves_values(self):
        net = SCNN(SCNNConfig(in_channels=2), seed=1)
        net64 = net.astype(np.float64)
        for name, arr in net.state_arrays().items():
            np.testing.assert_array_equal(net64.state_arrays()[name], arr.astype(np.float64))


class TestAdam:
    def test_first_step_is_lr(self):
        p = [np.zeros(5)]
        g = [np.array([1e-3, -3.0, 2.0, 1e3, -0.5])]
        adam_step(p, g, {}, 1e-3)
        np.testing.assert_allclose(np.abs(p[0]), 1e-3, rtol=1e-4)
        np.testing.assert_array_equal(np.sign(p[0]), -np.sign(g[0]))

    def test_zero_gradient(self):
        p = [np.arange(4.0)]
        adam_step(p, [np.zeros(4)], {}, 1e-2)
        np.testing.assert_array_equal(p[0], np.arange(4.0))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(3)], [np.zeros(4)], {}, 1e-3)

    def test_against_reference_sequence(self):
        # hand-rolled bias-corrected recursion
        rng = np.random.default_rng(22)
        grads = rng.standard_normal((10, 3))
        p, state = [np.zeros(3)], {}
        m = v = np.zeros(3)
        ref = np.zeros(3)
        for t, g in enumerate(grads, 1):
            adam_step(p, [g], state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12)

    def test_schedule(self):
        lrs = [step_schedule(i, 100, 1e-3) for i in (0, 49, 50, 74, 75, 99)]
        np.testing.assert_allclose(lrs, [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5])


class TestTraining:
    def test_overfit_mlp(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal((32, 4))
        y = rng.uniform(0, 1, (32, 2))
        net = MLP(MLPConfig(n_in=4), seed=0)
        res = train(net, lambda i: (x, y), TrainConfig(batches=500, batch_size=32, lr=1e-3,
                                                       milestones=(0.8, 0.9)))
        assert res.losses[-1] < 1e-3

    def test_overfit_scnn(self, realistic_inputs):
        rng = np.random.default_rng(24)
        x = realistic_inputs
        y = rng.uniform(0, 1, (len(x), 2))
        net = SCNN(SCNNConfig(in_channels=2), seed=0)
        res = train(net, lambda i: (x, y), TrainConfig(batches=500, batch_size=len(x), lr=1e-3,
                                                       milestones=(0.8, 0.9)))
        assert res.losses[-1] < 1e-3

    def test_loss_decreases(self, hardi):
        cfg = TrainConfig(batches=300, batch_size=128, seed=0)
        net = make_network("pa-mlp", hardi, "2c", seed=0)
        sim = model.Simulator(hardi, "2c", snr=30, seed=1)
        res = train(net, batch_source("pa-mlp", sim, 128), cfg)
        assert np.median(res.losses[-100:]) < np.median(res.losses[:100])

    @pytest.mark.parametrize("arch,batches", [("pa-mlp", 20), ("scnn", 3)])
    def test_deterministic(self, hardi, arch, batches):
        curves = []
        for _ in range(2):
            net = make_network(arch, hardi, "2c", seed=7)
            sim = model.Simulator(hardi, "2c", snr=30, seed=8)
            curves.append(train(net, batch_source(arch, sim, 16),
                                TrainConfig(batches=batches, batch_size=16)).losses)
        np.testing.assert_array_equal(curves[0], curves[1])

    def test_non_finite_loss_aborts(self):
        net = MLP(MLPConfig(n_in=2))
        x = np.ones((4, 2))
        y = np.full((4, 2), np.nan)
        with pytest.raises(TrainingError, match="batch 0"):
            train(net, lambda i: (x, y), TrainConfig(batches=2, batch_size=4))

    def test_non_finite_input_aborts(self):
        net = MLP(MLPConfig(n_in=2))
        x = np.array([[1.0, np.inf]] * 4)
        with pytest.raises(TrainingError, match="fc0"):
            train(net, lambda i: (x, np.zeros((4, 2))), TrainConfig(batches=1, batch_size=4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batches=0)
        with pytest.raises(ValueError):
            TrainConfig(milestones=(0.75, 0.5))
        with pytest.raises(ValueError):
            TrainConfig(target_scale=(0.0, 1.0))


class TestWeights:
    def test_round_trip(self, tmp_path, realistic_inputs):
        net = SCNN(SCNNConfig(in_channels=2), seed=3)
        net.buffers["bn0.mean"][:] = 0.25
        save_weights(tmp_path / "w.wts", net, {"seed": 3, "snr": 30})
        back, meta = load_weights(tmp_path / "w.wts")
        np.testing.assert_array_equal(back.predict(realistic_inputs), net.predict(realistic_inputs))
        assert meta["seed"] == "3" and meta["snr"] == "30"

    def test_manifest(self, tmp_path):
        net = SCNN(SCNNConfig(in_channels=2))
        save_weights(tmp_path / "w.wts", net)
        header, arrays = read_manifest(tmp_path / "w.wts")
        assert header["n_params"] == "48930"
        assert header["byte_order"] == "little" and header["dtype"] == "float32"
        kinds = [k for _, k, _ in arrays]
        assert kinds == sorted(kinds, key=lambda k: k != "param")  # params first
        size = sum(int(np.prod(s)) for _, _, s in arrays)
        assert (tmp_path / "w.wts.bin").stat().st_size == 4 * size

    def test_identical_seeds_identical_files(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            save_weights(tmp_path / name / "w.wts", MLP(MLPConfig(n_in=3), seed=9), {"seed": 9})
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "w.wts").read_bytes() == (b / "w.wts").read_bytes()
        assert (a / "w.wts.bin").read_bytes() == (b / "w.wts.bin").read_bytes()
        assert "created = 2023-11-14T22:13:20Z" in (a / "w.wts").read_text()

    def test_truncated_blob(self, tmp_path):
        save_weights(tmp_path / "w.wts", MLP(MLPConfig(n_in=3)))
        blob = tmp_path / "w.wts.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ValueError, match="blob holds"):
            load_weights(tmp_path / "w.wts")

    def test_reserved_metadata(self, tmp_path):
        with pytest.raises(ValueError):
            save_weights(tmp_path / "w.wts", MLP(MLPConfig(n_in=3)), {"n_params": 1})

    def test_estimator_round_trip(self, tmp_path, hardi):
        est = Estimator(make_network("pa-mlp", hardi, "2c", seed=1), "pa-mlp", hardi, "2c")
        est.save(tmp_path / "e.wts", seed=1)
        back = Estimator.load(tmp_path / "e.wts")
        sig = model.synth_signal(model.sample_config_2c(np.random.default_rng(25), 5), hardi)
        np.testing.assert_array_equal(back.predict(sig), est.predict(sig))
        np.testing.assert_allclose(back.scale, [1 / 3, 1.0], rtol=1e-15)

    def test_estimator_scheme_mismatch(self, tmp_path, hardi):
        est = Estimator(make_network("scnn", hardi, "2c"), "scnn", hardi, "2c")
        est.save(tmp_path / "e.wts")
        tv = model.load_scheme("tensor_valued")
        with pytest.raises(ValueError, match="scheme mismatch") as info:
            Estimator.load(tmp_path / "e.wts", tv)
        assert hardi.describe() in str(info.value) and tv.describe() in str(info.value)

    def test_unknown_arch(self, hardi):
        with pytest.raises(ValueError, match="unknown architecture"):
            make_network("cnn", hardi, "2c")

    def test_optimizer_object(self):
        p = Parameter(np.ones(3))
        p.grad = np.array([1.0, -1.0, 0.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_allclose(p.value, [0.9, 1.1, 1.0], rtol=1e-6)
