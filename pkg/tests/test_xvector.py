import numpy as np
import pytest

from bxv.errors import DataError, ShapeError
from bxv.numkernel import ConstantNoise, RngStream
from bxv.varbayes import GaussianPosterior, grad_mu, grad_rho, kl_closed_form, softplus_sigma
from bxv.xvector import (
    LAYER_NAMES,
    NetworkConfig,
    TdnnLayerSpec,
    cross_entropy,
    draw_weights,
    extract_embedding,
    forward_with_weights,
    init_state,
    network_backward,
    network_forward,
    softmax,
    stats_pool,
    tdnn_forward,
)
from toymodel import central_diff, rel_error

TINY = dict(feature_dim=8, num_speakers=4, frame_dims=(16, 16, 16, 16, 16), embed_dim=16, segment7_dim=16)


def naive_tdnn(spec, weights, x):
    lo, hi = spec.context[0], spec.context[-1]
    rows = []
    for t in range(-lo, x.shape[0] - hi):
        v = np.concatenate([x[t + o] for o in spec.context])
        out = np.zeros(spec.out_dim)
        for j in range(spec.out_dim):
            out[j] = sum(v[i] * weights[i, j] for i in range(v.size)) + weights[-1, j]
        rows.append(np.maximum(out, 0.0))
    return np.array(rows)


class TestTdnn:
    def test_identity_single_offset(self):
        spec = TdnnLayerSpec("f", (0,), 3, 3)
        x = np.random.default_rng(0).standard_normal((6, 3))
        w = np.vstack([np.eye(3), np.zeros((1, 3))])
        np.testing.assert_array_equal(tdnn_forward(spec, w, x), np.maximum(x, 0))

    def test_length_arithmetic(self):
        spec = TdnnLayerSpec("f", (-1, 1), 2, 4)
        out = tdnn_forward(spec, np.ones((5, 4)), np.ones((5, 2)))
        assert out.shape == (3, 4)

    def test_naive_oracle(self):
        rng = np.random.default_rng(1)
        spec = TdnnLayerSpec("f", (-3, 0, 3), 4, 5)
        x = rng.standard_normal((15, 4))
        w = rng.standard_normal((spec.in_dim + 1, 5))
        assert np.max(np.abs(tdnn_forward(spec, w, x) - naive_tdnn(spec, w, x))) < 1e-12

    def test_too_short(self):
        spec = TdnnLayerSpec("f", (-2, -1, 0, 1, 2), 2, 2)
        with pytest.raises(DataError, match="at least 5 frames"):
            tdnn_forward(spec, np.ones((11, 2)), np.ones((4, 2)))

    def test_offsets_must_increase(self):
        with pytest.raises(ValueError):
            TdnnLayerSpec("f", (0, -1), 2, 2)


class TestStatsPool:
    def test_constant(self):
        out = stats_pool(np.full((7, 2), 3.0))
        np.testing.assert_allclose(out[0, :2], 3.0)
        np.testing.assert_allclose(out[0, 2:], 1e-5)

    def test_two_frames(self):
        out = stats_pool(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(out, [[1.0, 1.0]])

    def test_two_pass_oracle(self):
        x = np.random.default_rng(2).standard_normal((50, 7))
        out = stats_pool(x)[0]
        mean = np.array([sum(x[:, j]) / 50 for j in range(7)])
        std = np.array([np.sqrt(sum((x[:, j] - mean[j]) ** 2) / 50) for j in range(7)])
        np.testing.assert_allclose(out, np.concatenate([mean, std]), atol=1e-10)

    def test_any_length_collapses_to_one_row(self):
        for t in (1, 3, 40):
            assert stats_pool(np.ones((t, 5))).shape == (1, 10)


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy(np.zeros(4), 2)
        assert loss == pytest.approx(np.log(4), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros(5)
        logits[1] = 30.0
        assert cross_entropy(logits, 1)[0] < 1e-12

    def test_gradient_fd(self):
        logits = np.random.default_rng(3).standard_normal(6)
        _, d = cross_entropy(logits, 4)
        fd = central_diff(lambda z: cross_entropy(z, 4)[0], logits)
        np.testing.assert_allclose(d, fd, atol=1e-7)

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros(3), 3)


class TestNetwork:
    def test_config_bookkeeping(self):
        cfg = NetworkConfig()
        assert cfg.receptive_field == 15
        assert cfg.stats_dim == 2 * cfg.frame_dims[-1]
        assert cfg.layer("frame1").in_dim == cfg.feature_dim * 5
        big = NetworkConfig.full_size(num_speakers=1211)
        assert [l.in_dim for l in big.layers()][:5] == [120, 1536, 1536, 512, 512]
        assert big.layer("segment6").in_dim == 3000

    def test_frames_after_frame3(self):
        cfg = NetworkConfig(**TINY, variational_layers=())
        state = init_state(cfg, RngStream(0))
        _, tape = network_forward(state, np.ones((40, 8)))
        assert tape.preacts["frame3"].shape[0] == 40 - 14
        assert tape.pooled.shape == (1, 32)

    def test_zero_network_uniform(self):
        cfg = NetworkConfig(**dict(TINY, num_speakers=2), variational_layers=())
        state = init_state(cfg, RngStream(0))
        for name in LAYER_NAMES:
            state.params[name][:] = 0.0
        logits, _ = network_forward(state, np.random.default_rng(0).standard_normal((20, 8)))
        np.testing.assert_array_equal(logits, [0.0, 0.0])
        np.testing.assert_allclose(softmax(logits), [0.5, 0.5])

    def test_variational_off_equals_deterministic(self):
        cfg = NetworkConfig(**TINY)
        state = init_state(cfg, RngStream(1))
        x = np.random.default_rng(1).standard_normal((25, 8))
        a, _ = network_forward(state, x, "mean")
        b, _ = network_forward(state.as_deterministic(), x)
        np.testing.assert_array_equal(a, b)

    def test_zero_noise_sample_is_mean(self):
        cfg = NetworkConfig(**TINY, variational_layers=("frame1", "segment7"))
        state = init_state(cfg, RngStream(2))
        x = np.random.default_rng(2).standard_normal((25, 8))
        a, _ = network_forward(state, x, "sample", ConstantNoise(0.0))
        b, _ = network_forward(state, x, "mean")
        np.testing.assert_array_equal(a, b)

    def test_feature_dim_checked(self):
        state = init_state(NetworkConfig(**TINY), RngStream(0))
        with pytest.raises(ShapeError):
            network_forward(state, np.ones((30, 7)))
        with pytest.raises(DataError):
            network_forward(state, np.ones((14, 8)))

    def test_shift_invariance_of_pooled_stats(self):
        cfg = NetworkConfig(**TINY, variational_layers=())
        state = init_state(cfg, RngStream(3))
        stream = np.random.default_rng(3).standard_normal((60, 8))
        _, a = network_forward(state, stream[5:40])
        _, b = network_forward(state, stream[5:40].copy())
        np.testing.assert_array_equal(a.pooled, b.pooled)
        # per-frame outputs of a window equal the matching rows of the longer stream
        _, full = network_forward(state, stream)
        np.testing.assert_allclose(a.preacts["frame5"], full.preacts["frame5"][5:5 + 35 - 14], atol=1e-12)


class TestBackward:
    def test_zero_dlogits(self):
        state = init_state(NetworkConfig(**TINY, variational_layers=()), RngStream(0))
        _, tape = network_forward(state, np.random.default_rng(0).standard_normal((20, 8)))
        grads = network_backward(state, tape, np.zeros(4))
        assert all(np.all(g == 0) for g in grads.values())

    def test_softmax_layer_outer_product(self):
        state = init_state(NetworkConfig(**TINY, variational_layers=()), RngStream(0))
        _, tape = network_forward(state, np.random.default_rng(0).standard_normal((20, 8)))
        d = np.array([0.1, -0.2, 0.3, -0.2])
        grads = network_backward(state, tape, d)
        a7 = np.maximum(tape.preacts["segment7"][0], 0)
        np.testing.assert_allclose(grads["softmax"], np.outer(np.append(a7, 1.0), d), atol=1e-15)

    def test_tape_mismatch(self):
        a = init_state(NetworkConfig(**TINY, variational_layers=()), RngStream(0))
        b = init_state(NetworkConfig(**dict(TINY, num_speakers=3), variational_layers=()), RngStream(0))
        _, tape = network_forward(a, np.ones((20, 8)))
        with pytest.raises(ShapeError):
            network_backward(b, tape, np.zeros(3))

    def test_deterministic_fd(self):
        cfg = NetworkConfig(**TINY, variational_layers=())
        state = init_state(cfg, RngStream(4))
        x = np.random.default_rng(4).standard_normal((20, 8))
        label = 2
        logits, tape = network_forward(state, x)
        _, d = cross_entropy(logits, label)
        grads = network_backward(state, tape, d)
        for name in LAYER_NAMES:
            def f(w, name=name):
                weights = dict(state.params)
                weights[name] = w
                return cross_entropy(forward_with_weights(cfg, weights, x)[0], label)[0]
            assert rel_error(grads[name], central_diff(f, state.params[name])) < 1e-5, name

    def test_bayesian_layer_fd_with_fixed_noise(self):
        cfg = NetworkConfig(**TINY, variational_layers=("frame1",), sigma_init=0.1)
        state = init_state(cfg, RngStream(5), sigma_p=0.2)
        post = state.posteriors["frame1"]
        post.mu += np.random.default_rng(5).standard_normal(post.shape) * 0.05
        prior = state.priors["frame1"]
        x = np.random.default_rng(6).standard_normal((22, 8))
        label, kl_weight = 1, 0.3
        weights, samples = draw_weights(state, "sample", RngStream(9))
        eps = samples["frame1"].eps
        logits, tape = forward_with_weights(cfg, weights, x, samples)
        _, d = cross_entropy(logits, label)
        g = network_backward(state, tape, d)["frame1"]

        def objective(mu, rho):
            w = dict(weights)
            w["frame1"] = mu + softplus_sigma(rho) * eps
            nll = cross_entropy(forward_with_weights(cfg, w, x)[0], label)[0]
            return kl_weight * kl_closed_form(GaussianPosterior(mu, rho), prior) + nll

        fd_mu = central_diff(lambda m: objective(m, post.rho), post.mu)
        fd_rho = central_diff(lambda r: objective(post.mu, r), post.rho)
        assert rel_error(grad_mu(post, prior, [g], kl_weight), fd_mu) < 1e-5
        assert rel_error(grad_rho(post, prior, [g], [eps], kl_weight), fd_rho) < 1e-5

    def test_zero_noise_matches_deterministic_grads(self):
        cfg = NetworkConfig(**TINY)
        state = init_state(cfg, RngStream(6))
        det = state.as_deterministic()
        x = np.random.default_rng(7).standard_normal((30, 8))
        la, ta = network_forward(state, x, "sample", ConstantNoise(0.0))
        lb, tb = network_forward(det, x)
        np.testing.assert_array_equal(la, lb)
        ga = network_backward(state, ta, cross_entropy(la, 0)[1])
        gb = network_backward(det, tb, cross_entropy(lb, 0)[1])
        for name in LAYER_NAMES:
            np.testing.assert_array_equal(ga[name], gb[name])


class TestEmbedding:
    def setup_method(self):
        self.cfg = NetworkConfig(**TINY, variational_layers=())
        self.state = init_state(self.cfg, RngStream(8))
        self.x = np.random.default_rng(8).standard_normal((30, 8))

    def test_zero_segment6_gives_bias(self):
        b = np.arange(16.0)
        self.state.params["segment6"][:-1] = 0.0
        self.state.params["segment6"][-1] = b
        np.testing.assert_array_equal(extract_embedding(self.state, self.x), b)

    def test_independent_of_later_layers(self):
        before = extract_embedding(self.state, self.x)
        self.state.params["segment7"] += 1.0
        self.state.params["softmax"] *= -3.0
        np.testing.assert_array_equal(extract_embedding(self.state, self.x), before)

    def test_matches_tape(self):
        _, tape = network_forward(self.state, self.x)
        np.testing.assert_array_equal(extract_embedding(self.state, self.x), tape.preacts["segment6"][0])

    def test_sample_mode_varies_with_seed(self):
        state = init_state(NetworkConfig(**TINY), RngStream(8))
        a = extract_embedding(state, self.x, "sample", RngStream(1), j_samples=2)
        b = extract_embedding(state, self.x, "sample", RngStream(2), j_samples=2)
        assert not np.array_equal(a, b)
