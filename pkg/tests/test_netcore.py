import numpy as np
import pytest

from landprobe import netcore as nc
from landprobe.netcore import (BatchNorm, Conv2d, Dense, DimensionError, Flatten, MaxPool, NetworkSpec, NumericError,
                               ParamVector, ReLU, ResidualBlock)

from conftest import central_diff, random_batch

CONV = NetworkSpec(
    (Conv2d(2, 3, 3, padding=1), BatchNorm(3), ReLU(), MaxPool(2), Conv2d(3, 4, 2, stride=2), ReLU(), Flatten(),
     Dense(4, 3)),
    (2, 4, 4), 3)

RESIDUAL = NetworkSpec(
    (Conv2d(1, 2, 3, padding=1), ReLU(),
     ResidualBlock((Conv2d(2, 2, 3, padding=1), BatchNorm(2), ReLU(), Conv2d(2, 2, 3, padding=1))), ReLU(),
     MaxPool(4), Flatten(), Dense(2, 2)),
    (1, 4, 4), 2)


def test_mlp_builder_and_widths():
    spec = NetworkSpec.mlp([3, 5, 4, 2])
    assert spec.is_mlp()
    assert spec.widths() == [3, 5, 4, 2]
    assert spec.min_width == 4
    assert nc.param_count(spec) == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2


def test_dimension_error_names_layer():
    with pytest.raises(DimensionError) as err:
        NetworkSpec((Dense(3, 4), ReLU(), Dense(5, 2)), (3,), 2)
    assert err.value.layer == "2"


def test_dimension_error_inside_residual_block():
    with pytest.raises(DimensionError) as err:
        NetworkSpec((ResidualBlock((Conv2d(1, 2, 3, padding=1),)), Flatten(), Dense(16, 2)), (1, 4, 4), 2)
    assert err.value.layer == "0"
    with pytest.raises(DimensionError) as err:
        NetworkSpec((ResidualBlock((Conv2d(1, 1, 3, padding=1), Dense(4, 4))), Flatten(), Dense(16, 2)), (1, 4, 4), 2)
    assert err.value.layer == "0.1"


def test_maxpool_needs_divisible_input():
    with pytest.raises(DimensionError):
        NetworkSpec((MaxPool(3), Flatten(), Dense(4, 2)), (1, 4, 4), 2)


def test_bad_layer_sizes_rejected():
    with pytest.raises(ValueError):
        Dense(0, 3)
    with pytest.raises(ValueError):
        Conv2d(1, 1, 3, padding=-1)


@pytest.mark.parametrize("spec", [NetworkSpec.mlp([3, 4, 2]), CONV, RESIDUAL])
def test_spec_json_round_trip(spec):
    assert NetworkSpec.from_json(spec.to_json()) == spec


def test_param_vector_views_share_memory():
    spec = NetworkSpec.mlp([2, 3, 2])
    p = nc.init(spec, "he_uniform", 0)
    p.view(0, "bias")[...] = 7.0
    assert np.all(p.values[p.segment("0", "bias").start: p.segment("0", "bias").stop] == 7.0)
    assert p.mask("bias").sum() == 5


def test_flatten_unflatten_round_trip():
    p = nc.init(CONV, "default", 3)
    q = ParamVector.flatten(p.unflatten(), p.segments)
    np.testing.assert_array_equal(p.values, q.values)


def test_checkpoint_round_trip_bitwise(tmp_path):
    p = nc.init(RESIDUAL, "he_uniform", 5)
    p.save(tmp_path / "p.bin")
    q = ParamVector.load(tmp_path / "p.bin")
    assert q.segments == p.segments
    assert q.values.tobytes() == p.values.tobytes()


def test_checkpoint_rejects_truncation():
    blob = nc.dump_params(nc.init(NetworkSpec.mlp([2, 3, 2]), "default", 0))
    with pytest.raises(ValueError):
        nc.load_params(blob[:-8])
    with pytest.raises(ValueError):
        nc.load_params(b"XXXXXXXX" + blob[8:])


def test_init_schemes():
    spec = NetworkSpec.mlp([4, 8, 3])
    z = nc.init(spec, "zero")
    assert not z.values.any()
    he = nc.init(spec, "he_uniform", 0)
    w = he.view(0, "weight")
    assert np.abs(w).max() <= np.sqrt(6 / 4)
    assert not he.view(0, "bias").any()
    d = nc.init(spec, "default", 0)
    assert np.abs(d.view(0, "bias")).max() <= 0.5
    with pytest.raises(ValueError):
        nc.init(spec, "gaussian")


def test_init_sets_batchnorm_scale_to_one():
    p = nc.init(CONV, "he_uniform", 0)
    np.testing.assert_array_equal(p.view(1, "bn-scale"), np.ones(3))


def test_zero_logits_give_log_classes():
    assert nc.loss_value(np.zeros((5, 7)), np.arange(5)) == pytest.approx(np.log(7), abs=1e-15)


def test_loss_rejects_nonfinite_logits():
    with pytest.raises(NumericError):
        nc.loss_value(np.array([[np.inf, 0.0]]), np.array([0]))


def test_forward_rejects_wrong_input_shape():
    spec = NetworkSpec.mlp([3, 4, 2])
    p = nc.init(spec, "default", 0)
    with pytest.raises(DimensionError):
        nc.forward(spec, p, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        nc.forward(spec, p.values[:-1], np.zeros((2, 3)))


def test_batch_validation():
    with pytest.raises(ValueError):
        nc.Batch(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        nc.Batch(np.zeros((2, 2)), np.array([0, 3]), num_classes=3)


@pytest.mark.parametrize("spec,mode", [
    (NetworkSpec.mlp([3, 5, 4, 3]), "train"),
    (CONV, "train"),
    (CONV, "eval"),
    (RESIDUAL, "train"),
])
def test_gradient_matches_finite_differences(spec, mode, rng):
    batch = random_batch(spec, 6, rng)
    p = nc.init(spec, "default", 1)
    stats = nc.calibrate_stats(spec, p, batch.inputs) if mode == "eval" else None
    _, g = nc.loss_and_grad(spec, p, batch, mode, stats)
    fd = central_diff(lambda v: nc.loss_value(nc.forward(spec, v, batch, mode, stats), batch.labels), p.values)
    np.testing.assert_allclose(g, fd, atol=1e-7, rtol=1e-5)


def test_input_gradient_matches_finite_differences(rng):
    batch = random_batch(CONV, 3, rng)
    p = nc.init(CONV, "default", 2)
    stats = nc.calibrate_stats(CONV, p, batch.inputs)
    dx, loss = nc.input_grad(CONV, p, batch.inputs, batch.labels, "eval", stats)
    fd = central_diff(lambda x: nc.loss_value(nc.forward(CONV, p, x, "eval", stats), batch.labels), batch.inputs)
    np.testing.assert_allclose(dx, fd, atol=1e-7, rtol=1e-5)


def test_param_jacobians_match_finite_differences(rng):
    x = rng.standard_normal((2,) + RESIDUAL.input_shape)
    p = nc.init(RESIDUAL, "default", 4)
    stats = nc.calibrate_stats(RESIDUAL, p, rng.standard_normal((8,) + RESIDUAL.input_shape))
    J = nc.param_jacobians(RESIDUAL, p, x, stats)
    assert J.shape == (2, 2, len(p))
    for k in range(2):
        fd = central_diff(lambda v: nc.forward(RESIDUAL, v, x, "eval", stats)[:, k].sum(), p.values)
        np.testing.assert_allclose(J[:, k].sum(0), fd, atol=1e-7, rtol=1e-5)


def test_per_output_jacobian_is_row_of_batched():
    spec = NetworkSpec.mlp([3, 4, 2])
    p = nc.init(spec, "default", 0)
    x = np.arange(6.0).reshape(2, 3) / 5
    np.testing.assert_allclose(nc.per_output_param_jacobian(spec, p, x[1]), nc.param_jacobians(spec, p, x)[1])


def test_train_mode_updates_running_stats(rng):
    batch = random_batch(CONV, 8, rng)
    p = nc.init(CONV, "default", 0)
    stats = nc.init_stats(CONV)
    nc.loss_and_grad(CONV, p, batch, "train", stats)
    assert not np.allclose(stats["1"]["mean"], 0.0)


def test_calibrate_stats_matches_batch_statistics(rng):
    spec = NetworkSpec((Dense(3, 4), BatchNorm(4), ReLU(), Dense(4, 2)), (3,), 2)
    p = nc.init(spec, "default", 0)
    x = rng.standard_normal((50, 3))
    stats = nc.calibrate_stats(spec, p, x)
    pre = x @ p.view(0, "weight").T + p.view(0, "bias")
    np.testing.assert_allclose(stats["1"]["mean"], pre.mean(0))
    np.testing.assert_allclose(stats["1"]["var"], pre.var(0, ddof=1))
    # eval with calibrated stats reproduces train-mode output up to the ddof correction
    np.testing.assert_allclose(nc.forward(spec, p, x, "eval", stats), nc.forward(spec, p, x, "train"), atol=0.05)


def test_relu_subgradient_at_zero_is_zero():
    spec = NetworkSpec((Dense(1, 1), ReLU(), Dense(1, 2)), (1,), 2)
    p = nc.init(spec, "zero")
    p.view(2, "weight")[...] = 1.0
    _, g = nc.loss_and_grad(spec, p, nc.Batch(np.zeros((1, 1)), np.array([0])))
    assert g[p.segment("0", "weight").start] == 0.0


def test_layer_input_shapes_walks_residual_blocks():
    shapes = nc.layer_input_shapes(RESIDUAL)
    assert shapes["2.0"][1] == (2, 4, 4)
    assert shapes["6"][1] == (2,)
    assert isinstance(shapes["2.2"][0], ReLU)
