import zlib

import numpy as np
import pytest
from conftest import sidon_values
from scipy.signal import correlate

from spectraforge.tensornet import (
    MAIN_WEIGHTS,
    PRETRAIN_WEIGHTS,
    Adam,
    AdamState,
    Checkpoint,
    CheckpointError,
    ConfigError,
    LossError,
    LossWeights,
    NetworkConfig,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    bilinear_resize,
    build_network,
    composite_loss,
    concat_channels,
    conv2d,
    leaky_relu,
    load_checkpoint,
    loss_delta_bands,
    loss_delta_pixel,
    loss_mae,
    loss_mse,
    loss_smooth_l1,
    maxpool2,
    no_grad,
    save_checkpoint,
    sigmoid,
)
from spectraforge.tensornet.gradcheck import gradcheck, rel_error
from spectraforge.tensornet.tensor import resize_matrix

TRIALS = 20
TOL = 1e-3


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)


def distinct(rng, *shape):
    """Values 0.01 apart, so no max is within a finite-difference step of a tie."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.01).reshape(shape).astype(np.float32), requires_grad=True)


def sidon_tensor(rng, *shape):
    n = int(np.prod(shape))
    return Tensor(sidon_values(n, rng=rng).reshape(shape).astype(np.float32), requires_grad=True)


def loss_inputs(rng):
    # few elements keep the Sidon values small, so float32 rounding stays far below the step
    pred = sidon_tensor(rng, 2, 3, 3, 3)
    gt = (rng.permutation(54).reshape(2, 3, 3, 3) * 0.01 + 0.005).astype(np.float32)
    mask = rng.random((2, 1, 3, 3)) > 0.2
    return pred, gt, mask


def micro_config():
    return NetworkConfig(
        input=(8, 8, 2), output=(4, 4, 3), encoder_levels=2, encoder_channels=[2, 3, 4],
        decoder_levels=1, decoder_channels=[4, 3],
    )


def to_float64(net):
    for p in net.parameters():
        p.data = p.data.astype(np.float64)


class TestOpsForward:
    def test_conv_matches_scipy(self, rng):
        x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        for n in range(2):
            for f in range(4):
                ref = sum(correlate(x[n, c].astype(np.float64), w[f, c], mode="same") for c in range(3)) + b[f]
                np.testing.assert_allclose(out[n, f], ref, atol=1e-5)

    def test_conv_1x1_is_matmul(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 3, 1, 1)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(out[0], np.einsum("fc,chw->fhw", w[:, :, 0, 0], x[0]), atol=1e-6)

    @pytest.mark.parametrize("wshape", [(2, 4, 3, 3), (2, 3, 2, 2)])
    def test_conv_shape_errors(self, wshape):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros(wshape)))

    def test_maxpool_oracle(self, rng):
        x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
        out = maxpool2(Tensor(x)).data
        assert out.shape == (2, 3, 2, 3)
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(out[:, :, i, j], x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3)))

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        maxpool2(x).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    @pytest.mark.parametrize("n_in,n_out", [(4, 8), (8, 4), (5, 3), (16, 286 // 16)])
    def test_resize_rows_sum_to_one(self, n_in, n_out):
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_resize_constant_and_identity(self, rng):
        c = Tensor(np.full((1, 2, 4, 5), 0.3, dtype=np.float32))
        np.testing.assert_allclose(bilinear_resize(c, (9, 7)).data, 0.3, atol=1e-6)
        x = Tensor(rng.random((1, 1, 3, 3)))
        assert bilinear_resize(x, (3, 3)) is x

    def test_resize_upsample_by_two_half_pixel(self):
        # half-pixel centers: the first output sits a quarter pixel left of input 0, so clamps to it
        m = resize_matrix(2, 4)
        np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])

    def test_activations(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0], dtype=np.float32))
        np.testing.assert_allclose(leaky_relu(x).data, [-0.02, 0.0, 3.0], atol=1e-7)
        np.testing.assert_allclose(sigmoid(x).data, 1 / (1 + np.exp([2.0, 0.0, -3.0])), atol=1e-7)

    def test_concat(self, rng):
        a, b = Tensor(rng.random((1, 2, 3, 3))), Tensor(rng.random((1, 1, 3, 3)))
        assert concat_channels(a, b).shape == (1, 3, 3, 3)
        with pytest.raises(ShapeError):
            concat_channels(a, Tensor(rng.random((1, 1, 2, 3))))

    def test_no_grad_builds_no_graph(self, rng):
        x = param(rng, 1, 1, 4, 4)
        with no_grad():
            y = sigmoid(x)
        assert y._backward is None and y._parents == ()
        assert sigmoid(x)._backward is not None

    def test_non_finite_raises(self):
        x = Tensor(np.array([np.finfo(np.float32).max], dtype=np.float32))
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            x * 10.0

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        (x * x + x).backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_needs_scalar(self, rng):
        with pytest.raises(ShapeError):
            sigmoid(param(rng, 2, 2)).backward()


class TestOpGradients:
    """Central differences, float32, eps 1e-3, on fresh random tensors each trial."""

    @pytest.mark.parametrize(
        "name",
        ["conv2d", "conv2d_5x5", "maxpool2", "bilinear_up", "bilinear_down", "leaky_relu", "sigmoid", "concat"],
    )
    def test_op(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = 0.0
        for _ in range(TRIALS):
            if name == "conv2d":
                errs = gradcheck(conv2d, [param(rng, 1, 2, 5, 5), param(rng, 3, 2, 3, 3), param(rng, 3)], rng)
            elif name == "conv2d_5x5":
                errs = gradcheck(conv2d, [param(rng, 2, 1, 6, 5), param(rng, 2, 1, 5, 5), param(rng, 2)], rng)
            elif name == "maxpool2":
                errs = gradcheck(maxpool2, [distinct(rng, 2, 3, 6, 6)], rng)
            elif name == "bilinear_up":
                errs = gradcheck(lambda a: bilinear_resize(a, (7, 9)), [param(rng, 1, 2, 5, 4)], rng)
            elif name == "bilinear_down":
                errs = gradcheck(lambda a: bilinear_resize(a, (3, 2)), [param(rng, 1, 2, 7, 5)], rng)
            elif name == "leaky_relu":
                x = param(rng, 1, 2, 5, 4)
                x.data += np.sign(x.data) * np.float32(0.01)
                errs = gradcheck(leaky_relu, [x], rng)
            elif name == "sigmoid":
                errs = gradcheck(sigmoid, [param(rng, 2, 3, 4)], rng)
            else:
                errs = gradcheck(concat_channels, [param(rng, 1, 2, 3, 3), param(rng, 1, 1, 3, 3)], rng)
            worst = max(worst, *errs)
        assert worst < TOL

    @pytest.mark.parametrize("name", ["mae", "mse", "smooth_l1", "delta_pixel", "delta_bands", "delta_pixel_gt", "delta_bands_gt"])
    def test_loss(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        fns = {
            "mae": lambda p, g, m: loss_mae(p, g, m),
            "mse": lambda p, g, m: loss_mse(p, g, m),
            "smooth_l1": lambda p, g, m: loss_smooth_l1(p, g, m, 0.5),
            "delta_pixel": lambda p, g, m: loss_delta_pixel(p, m),
            "delta_bands": lambda p, g, m: loss_delta_bands(p, m),
            "delta_pixel_gt": lambda p, g, m: loss_delta_pixel(p, m, np.zeros_like(g)),
            "delta_bands_gt": lambda p, g, m: loss_delta_bands(p, m, np.zeros_like(g)),
        }
        worst = 0.0
        for _ in range(TRIALS):
            pred, gt, mask = loss_inputs(rng)
            worst = max(worst, *gradcheck(lambda p: fns[name](p, gt, mask), [pred], rng))
        assert worst < TOL

    def test_composite(self, rng):
        pred, gt, mask = loss_inputs(rng)
        for w in (PRETRAIN_WEIGHTS, MAIN_WEIGHTS):
            errs = gradcheck(lambda p: composite_loss(p, gt, mask, w, beta=0.5)[0], [pred], rng)
            assert max(errs) < TOL

    def test_rel_error(self):
        assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
        assert rel_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2))


class TestLossValues:
    def test_delta_pixel_fixture(self):
        p = Tensor(np.array([[0.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2), dtype=np.float64)
        assert abs(loss_delta_pixel(p).item() - 0.75) < 1e-12

    def test_delta_bands_fixture(self):
        p = Tensor(np.array([0.0, 1.0, 0.0]).reshape(1, 3, 1, 1), dtype=np.float64)
        assert abs(loss_delta_bands(p).item() - 1.0) < 1e-12

    @pytest.mark.parametrize("beta", [0.25, 1.0, 2.0])
    def test_smooth_l1_continuity_at_beta(self, beta):
        def at(d):
            p = Tensor(np.array([d]).reshape(1, 1, 1, 1), requires_grad=True, dtype=np.float64)
            v = loss_smooth_l1(p, np.zeros((1, 1, 1, 1)), None, beta)
            v.backward()
            return v.item(), float(p.grad.reshape(()))

        quad = 0.5 * beta * beta / beta
        lin = beta - 0.5 * beta
        assert abs(quad - lin) < 1e-12
        v, g = at(beta)
        assert abs(v - lin) < 1e-12 and abs(g - 1.0) < 1e-12
        below = at(np.nextafter(beta, 0))
        assert abs(below[0] - v) < 1e-12 and abs(below[1] - g) < 1e-12

    def test_mae_mse_oracle(self, rng):
        p = rng.random((2, 3, 4, 4))
        g = rng.random((2, 3, 4, 4))
        m = rng.random((2, 1, 4, 4)) > 0.3
        full = np.broadcast_to(m, p.shape)
        d = (p - g)[full]
        pt = Tensor(p, dtype=np.float64)
        assert loss_mae(pt, g, m).item() == pytest.approx(np.abs(d).mean(), abs=1e-12)
        assert loss_mse(pt, g, m).item() == pytest.approx((d**2).mean(), abs=1e-12)

    def test_delta_pixel_oracle(self, rng):
        p = rng.random((1, 2, 4, 5))
        best = np.full(p.shape, -1.0)
        for b in range(2):
            for y in range(4):
                for x in range(5):
                    for dy, dx in ((-1, 0), (0, -1), (0, 1), (1, 0)):
                        if 0 <= y + dy < 4 and 0 <= x + dx < 5:
                            best[0, b, y, x] = max(best[0, b, y, x], abs(p[0, b, y, x] - p[0, b, y + dy, x + dx]))
        assert loss_delta_pixel(Tensor(p, dtype=np.float64)).item() == pytest.approx(best.mean(), abs=1e-12)

    def test_masked_neighbors_ignored(self):
        p = np.array([[0.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
        m = np.array([[True, False], [True, True]]).reshape(1, 1, 2, 2)
        assert loss_delta_pixel(Tensor(p, dtype=np.float64), m).item() == 0.0

    def test_empty_mask(self, rng):
        with pytest.raises(LossError):
            loss_mae(Tensor(rng.random((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2), dtype=bool))

    def test_single_band_delta(self):
        with pytest.raises(LossError):
            loss_delta_bands(Tensor(np.zeros((1, 1, 2, 2))))

    def test_loss_value_is_float64(self, rng):
        assert loss_mae(Tensor(rng.random((1, 1, 2, 2))), np.zeros((1, 1, 2, 2))).dtype == np.float64

    @pytest.mark.parametrize("w", [(0, 0, 0, 0, 0), (-1, 1, 0, 0, 0)])
    def test_bad_weights(self, w):
        with pytest.raises(LossError):
            LossWeights(*w)

    def test_composite_parts(self, rng):
        pred, gt, mask = loss_inputs(rng)
        total, parts = composite_loss(pred, gt, mask, PRETRAIN_WEIGHTS)
        assert set(parts) == {"mae", "mse", "dpix", "dband"}
        expect = parts["mae"] + parts["mse"] + 4 * parts["dpix"] + 4 * parts["dband"]
        assert total.item() == pytest.approx(expect, rel=1e-12)


class TestNetwork:
    def test_tiny_shapes(self, rng):
        net = build_network(NetworkConfig.tiny(), rng)
        with no_grad():
            out = net(rng.random((2, 8, 64, 64)).astype(np.float32))
        assert out.shape == (2, 32, 16, 16)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_parameter_count_matches_layout(self, rng):
        cfg = NetworkConfig.tiny()
        net = build_network(cfg, rng)
        ec, dc = cfg.encoder_channels, cfg.decoder_channels
        expect = sum(9 * ec[i] * ec[i + 1] + ec[i + 1] + 9 * ec[i + 1] ** 2 + ec[i + 1] for i in range(4))
        for j in range(2):
            skip = ec[cfg.skip_for(j) + 1]
            expect += 9 * (dc[j] + skip) * dc[j + 1] + dc[j + 1] + 9 * dc[j + 1] ** 2 + dc[j + 1]
        expect += dc[-1] * 32 + 32
        assert net.n_parameters() == expect

    def test_full_config_validates(self):
        cfg = NetworkConfig.full()
        assert cfg.output == (286, 286, 299)
        assert cfg.skip_map == {4: 0, 3: 1, 2: 2}

    @pytest.mark.parametrize(
        "change",
        [
            {"decoder_channels": [128, 32, 32]},
            {"encoder_channels": [8, 16, 32]},
            {"decoder_levels": 4, "decoder_channels": [128] * 4 + [32]},
            {"skip_map": {0: 5}},
            {"skip_map": {0: 1, 1: 1}},
            {"input": (8, 8, 8)},
            {"activation": "tanh"},
        ],
    )
    def test_invalid_configs(self, change):
        d = NetworkConfig.tiny().to_dict()
        d.update(change)
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict(d)

    def test_config_round_trip(self, tmp_path):
        cfg = NetworkConfig.tiny()
        cfg.save(tmp_path / "n.json")
        assert NetworkConfig.load(tmp_path / "n.json") == cfg

    def test_wrong_input_shape(self, rng):
        net = build_network(micro_config(), rng)
        with pytest.raises(ShapeError):
            net(np.zeros((1, 3, 8, 8)))

    def test_same_seed_same_weights(self):
        a = build_network(micro_config(), np.random.default_rng(4)).state()
        b = build_network(micro_config(), np.random.default_rng(4)).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_whole_network_gradcheck_float64(self, rng):
        # float64 with a tiny step keeps every perturbation on one side of each ReLU/max kink
        net = build_network(micro_config(), rng)
        to_float64(net)
        x = Tensor(rng.random((2, 2, 8, 8)), requires_grad=True, dtype=np.float64)
        gt = rng.random((2, 3, 4, 4))
        errs = gradcheck(lambda *_: loss_mse(net(x), gt), [x] + net.parameters(), rng, eps=1e-6)
        assert max(errs) < 1e-5

    def test_tiny_directional_derivative(self, rng):
        cfg = NetworkConfig.tiny(in_hw=(32, 32), out_hw=(8, 8))
        net = build_network(cfg, rng)
        to_float64(net)
        x = rng.random((1, 8, 32, 32))
        gt = rng.random((1, 32, 8, 8))
        net.zero_grad()
        loss_mae(net(Tensor(x, dtype=np.float64)), gt).backward()
        dirs = {k: rng.standard_normal(p.shape) for k, p in net.params.items()}
        analytic = sum(float((p.grad * dirs[k]).sum()) for k, p in net.params.items())
        base = {k: p.data.copy() for k, p in net.params.items()}
        vals = []
        h = 1e-7
        for s in (1, -1):
            for k, p in net.params.items():
                p.data = base[k] + s * h * dirs[k]
            with no_grad():
                vals.append(loss_mae(net(Tensor(x, dtype=np.float64)), gt).item())
        numeric = (vals[0] - vals[1]) / (2 * h)
        assert numeric == pytest.approx(analytic, rel=1e-4)

    def test_load_state_checks(self, rng):
        net = build_network(micro_config(), rng)
        st = net.state()
        with pytest.raises(ConfigError):
            net.load_state({k: v for k, v in list(st.items())[1:]})
        bad = dict(st)
        bad["head.b"] = np.zeros(7)
        with pytest.raises(ConfigError):
            net.load_state(bad)


class TestAdam:
    def test_matches_formula(self, rng):
        p = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
        start = p.data.astype(np.float64)
        state = AdamState.zeros_like([p])
        grads = [rng.standard_normal(5).astype(np.float32) for _ in range(3)]
        m = v = np.zeros(5)
        x = start.copy()
        for t, g in enumerate(grads, 1):
            adam_step([p], [g], state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-5, atol=1e-6)
        assert state.t == 3

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        p.grad = np.array([2.0, -0.5, 1e-3], dtype=np.float32)
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_zero_lr_is_noop(self, rng):
        p = param(rng, 4)
        before = p.data.copy()
        p.grad = rng.standard_normal(4).astype(np.float32)
        Adam([p], lr=0.0).step()
        np.testing.assert_array_equal(p.data, before)

    def test_none_grad_skipped(self, rng):
        p = param(rng, 4)
        before = p.data.copy()
        opt = Adam([p])
        opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert not opt.state.m[0].any()

    def test_negative_lr(self, rng):
        with pytest.raises(ValueError):
            Adam([param(rng, 2)], lr=-1)


class TestCheckpoint:
    @pytest.fixture
    def ck(self, rng):
        net = build_network(micro_config(), rng)
        st = net.state()
        return Checkpoint(
            config=micro_config().to_dict(), params=st,
            m={k: rng.random(v.shape).astype(np.float32) for k, v in st.items()},
            v={k: rng.random(v.shape).astype(np.float32) for k, v in st.items()},
            step=7, epoch=2, adam_t=7, rng_state={"a": 1}, history=[0.5, 0.25], extra={"stage": "main"},
        )

    def test_round_trip_bit_exact(self, tmp_path, ck):
        save_checkpoint(tmp_path / "c.ck", ck)
        back = load_checkpoint(tmp_path / "c.ck")
        for group in ("params", "m", "v"):
            a, b = getattr(ck, group), getattr(back, group)
            assert list(a) == list(b)
            assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert (back.step, back.epoch, back.adam_t, back.history) == (7, 2, 7, [0.5, 0.25])
        assert back.rng_state == {"a": 1} and back.extra == {"stage": "main"}
        assert not (tmp_path / "c.ck.tmp").exists()

    @pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "header"])
    def test_corruption_detected(self, tmp_path, ck, damage):
        path = tmp_path / "c.ck"
        save_checkpoint(path, ck)
        raw = path.read_bytes()
        if damage == "magic":
            raw = b"XXXX" + raw[4:]
        elif damage == "truncate":
            raw = raw[:-4]
        elif damage == "trailing":
            raw = raw + b"\0"
        else:
            raw = raw[:8] + b"#" + raw[9:]
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
