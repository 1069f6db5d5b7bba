import numpy as np
import pytest

from sparseloc.model import GaussianPsf, GridGeometry, MeasurementOperator, build_measurement_matrix
from sparseloc.simulate import NoiseModel, render_sequence, render_ulm_sequence, sample_structure
from sparseloc.train import (
    DivergenceError,
    OptimizerConfig,
    TrainSample,
    backprop,
    finite_difference_check,
    loss_mse,
    loss_mse_grad,
    make_covariance_samples,
    make_patches,
    train_net,
)
from sparseloc.unrolled import init_conv_net, init_lista_from_model, net_forward


def dense_net(k=3, seed=0):
    a = np.random.default_rng(seed).normal(size=(6, 12)) / 3
    return init_lista_from_model(MeasurementOperator.from_matrix(a), 0.05, k), a


def dense_batch(a, seed=1, b=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, a.shape[1])) * (rng.random((b, a.shape[1])) < 0.3)
    return (x @ a.T + 0.01 * rng.normal(size=(b, a.shape[0])), x)


def conv_batch(kind, seed=2):
    rng = np.random.default_rng(seed)
    side = 4 if kind == "ulm-conv" else 8
    inp = rng.normal(size=(2, side, side))
    tgt = rng.random((2, 8, 8)) * (rng.random((2, 8, 8)) < 0.2)
    return inp, tgt


def test_loss_examples():
    assert loss_mse(np.ones(4), np.ones(4)) == 0.0
    assert loss_mse(np.zeros(4), np.ones(4)) == 1.0
    np.testing.assert_allclose(loss_mse_grad(np.array([1.0, 3.0]), np.zeros(2)), [1.0, 3.0])
    with pytest.raises(ValueError):
        loss_mse(np.zeros(3), np.zeros(4))


def test_fd_check_dense_all_parameters():
    net, a = dense_net()
    errs = finite_difference_check(net, dense_batch(a))
    assert set(errs) == set(net.params)
    assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("kind", ["ulm-conv", "lsparcom-conv"])
def test_fd_check_conv_all_parameters(kind):
    net = init_conv_net(kind, GridGeometry(4, 2), K=3, filter_size=3, rng_seed=3,
                        filter_std=0.5, threshold_init=0.1, beta_init=3.0)
    errs = finite_difference_check(net, conv_batch(kind))
    assert set(errs) == set(net.params)
    assert max(errs.values()) < 1e-4


def test_dead_network_has_zero_filter_gradients():
    net = init_conv_net("ulm-conv", GridGeometry(4, 2), K=2, filter_size=3)
    for name in net.params:
        if name.startswith(("w0.", "w.")):
            net.params[name] = np.zeros((3, 3))
    inp, tgt = conv_batch("ulm-conv")
    loss, grads = backprop(net, (inp, np.zeros_like(tgt)))
    assert loss == 0.0
    # zero output with zero target: every gradient vanishes
    for g in grads.values():
        np.testing.assert_array_equal(g, 0)


def test_single_dense_layer_analytic_gradient():
    net, a = dense_net(k=1)
    y, x = dense_batch(a, b=1)
    z = y @ net.params["w0.0"].T
    th = np.log1p(np.exp(net.params["theta_raw.0"]))
    out = np.sign(z) * np.maximum(np.abs(z) - th, 0)
    g = 2 * (out - x) / out.size * (np.abs(z) > th)
    _, grads = backprop(net, (y, x))
    np.testing.assert_allclose(grads["w0.0"], g.T @ y, atol=1e-15)


def test_backprop_accepts_sample_forms():
    net, a = dense_net()
    y, x = dense_batch(a, b=2)
    samples = [TrainSample(y[i], x[i]) for i in range(2)]
    l1, g1 = backprop(net, (y, x))
    l2, g2 = backprop(net, samples)
    assert l1 == l2
    for n in g1:
        np.testing.assert_array_equal(g1[n], g2[n])


@pytest.fixture(scope="module")
def small_movie():
    op = build_measurement_matrix(GaussianPsf(1.0), GridGeometry(8, 2))
    return render_ulm_sequence(3.0, op, NoiseModel(), 4, 0)


def test_patch_count_and_shapes(small_movie):
    seq, gt = small_movie
    s = make_patches(seq, gt, patch_size=4, stride=2)
    assert len(s) == 4 * 3 * 3
    assert s[0].input.shape == (4, 4) and s[0].target.shape == (8, 8)
    flat = make_patches(seq, gt, patch_size=4, stride=2, flatten=True)
    assert flat[0].input.shape == (16,) and flat[0].target.shape == (64,)


def test_patches_cover_each_pixel_four_times_at_half_stride(small_movie):
    seq, gt = small_movie
    s = make_patches(seq, gt, patch_size=4, stride=2, rng_seed=None)
    cover = np.zeros((8, 8))
    for r in range(0, 5, 2):
        for c in range(0, 5, 2):
            cover[r:r + 4, c:c + 4] += 1
    assert cover[2:6, 2:6].min() == 4
    np.testing.assert_array_equal(s[0].input, seq.frames[0][:4, :4])


def test_patch_targets_without_blur_are_exact(small_movie):
    seq, gt = small_movie
    s = make_patches(seq, gt, patch_size=8, stride=8, rng_seed=None)
    for t, sample in enumerate(s):
        np.testing.assert_array_equal(sample.target.ravel(), gt.per_frame_x[t])


def test_patches_reject_oversized_patch(small_movie):
    with pytest.raises(ValueError):
        make_patches(*small_movie, patch_size=9)


def test_covariance_samples():
    op = build_measurement_matrix(GaussianPsf(1.0), GridGeometry(8, 2))
    em = sample_structure("uniform-points", {"count": 4, "side": 16, "margin": 2}, 0)
    seq, gt = render_sequence(em, op, NoiseModel(), 40, 1)
    s = make_covariance_samples(seq, gt, 20, patch_size=16, stride=16, rng_seed=None)
    assert len(s) == 2
    assert s[0].input.shape == (16, 16)
    assert s[0].input.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        make_covariance_samples(seq, gt, 1)


def test_zero_learning_rate_leaves_net_unchanged():
    net, a = dense_net()
    y, x = dense_batch(a, b=8)
    samples = [TrainSample(y[i], x[i]) for i in range(8)]
    res = train_net(net, samples, 3, OptimizerConfig(learning_rate=0.0))
    for n in net.params:
        np.testing.assert_array_equal(res.net.params[n], net.params[n])
    np.testing.assert_allclose(res.losses, res.initial_loss, rtol=1e-15)


def test_training_does_not_mutate_input_net():
    net, a = dense_net()
    before = {n: v.copy() for n, v in net.params.items()}
    y, x = dense_batch(a, b=4)
    train_net(net, [TrainSample(y[i], x[i]) for i in range(4)], 2)
    for n in before:
        np.testing.assert_array_equal(net.params[n], before[n])


def test_memorise_single_sample():
    net, a = dense_net(k=2)
    y, x = dense_batch(a, b=1)
    res = train_net(net, [TrainSample(y[0], x[0])], 5000, OptimizerConfig(learning_rate=3e-3))
    assert res.losses[-1] < 1e-6


def test_training_is_deterministic():
    net = init_conv_net("ulm-conv", GridGeometry(4, 2), K=2, filter_size=3, rng_seed=1)
    inp, tgt = conv_batch("ulm-conv")
    samples = [TrainSample(inp[i], tgt[i]) for i in range(2)]
    r1 = train_net(net, samples, 4, rng_seed=5)
    r2 = train_net(net, samples, 4, rng_seed=5)
    np.testing.assert_array_equal(r1.losses, r2.losses)
    for n in net.params:
        np.testing.assert_array_equal(r1.net.params[n], r2.net.params[n])


def test_small_learning_rate_loss_nearly_monotone():
    net, a = dense_net()
    y, x = dense_batch(a, b=64)
    samples = [TrainSample(y[i], x[i]) for i in range(64)]
    res = train_net(net, samples, 30, OptimizerConfig(learning_rate=1e-4, batch_size=64))
    losses = np.concatenate([[res.initial_loss], res.losses])
    assert np.all(losses[1:] <= losses[:-1] * 1.01)
    assert losses[-1] < losses[0]


def test_divergence_guard():
    net, a = dense_net()
    y, x = dense_batch(a, b=4)
    samples = [TrainSample(y[i], x[i]) for i in range(4)]
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train_net(net, samples, 50, OptimizerConfig(method="sgd", learning_rate=1e10))


def test_train_validation():
    net, a = dense_net()
    with pytest.raises(ValueError):
        train_net(net, [], 1)
    with pytest.raises(ValueError):
        OptimizerConfig(method="rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(batch_size=0)


def test_zero_epochs_returns_initial_net():
    net, a = dense_net()
    y, x = dense_batch(a, b=2)
    res = train_net(net, [TrainSample(y[i], x[i]) for i in range(2)], 0)
    assert len(res.losses) == 0
    np.testing.assert_array_equal(net_forward(res.net, y), net_forward(net, y))
