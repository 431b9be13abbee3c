import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landprobe import netcore as nc
from landprobe.data import synth_dataset, synth_images
from landprobe.ntkprobe import (FAMILIES, SweepTrainConfig, UndefinedMetricError, build_family, correlation,
                                fingerprint, mean_by_width, relative_change, sample_ntk, width_sweep, write_sweep_csv)

arrays = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).standard_normal((3, 3, 2, 2)))


def brute_force_ntk(spec, params, x, stats=None):
    """Explicit sum over parameters of products of per-output derivatives."""
    J = [nc.per_output_param_jacobian(spec, params, xi, stats) for xi in x]
    N, n, P = len(x), J[0].shape[0], J[0].shape[1]
    out = np.zeros((N, N, n, n))
    for i in range(N):
        for j in range(N):
            for k in range(n):
                for l in range(n):
                    out[i, j, k, l] = sum(J[i][k, p] * J[j][l, p] for p in range(P))
    return out


def test_matches_brute_force_on_small_mlp(rng):
    spec = nc.NetworkSpec.mlp([3, 4, 2])
    p = nc.init(spec, "default", 0)
    x = rng.standard_normal((3, 3))
    phi = sample_ntk(spec, p, x)
    ref = brute_force_ntk(spec, p, x)
    assert np.linalg.norm(phi.values - ref) / np.linalg.norm(ref) < 1e-12


def test_slice_invariants_on_residual_family(rng):
    ds = synth_images(3, (3, 4, 4), 6, seed=0)
    spec = build_family("residual", 2, ds.input_shape, 3, blocks=1)
    p = nc.init(spec, "he_uniform", 0)
    stats = nc.calibrate_stats(spec, p, ds.train.inputs)
    phi = sample_ntk(spec, p, ds.train.inputs[:4], stats=stats)
    v = phi.values
    np.testing.assert_array_equal(v, v.transpose(1, 0, 3, 2))
    assert phi.psd_defect() < 1e-10
    assert phi.gram.shape == (12, 12)
    assert phi.param_count == len(p)


def test_needs_two_images():
    spec = nc.NetworkSpec.mlp([2, 3, 2])
    with pytest.raises(ValueError):
        sample_ntk(spec, nc.init(spec, "default", 0), np.zeros((1, 2)))


def test_fingerprint_tracks_parameters():
    spec = nc.NetworkSpec.mlp([2, 3, 2])
    p = nc.init(spec, "default", 0)
    q = p.copy()
    assert fingerprint(spec, p) == fingerprint(spec, q)
    q.values[0] += 1e-12
    assert fingerprint(spec, p) != fingerprint(spec, q)


def test_metric_examples():
    a = np.arange(16.0).reshape(2, 2, 2, 2)
    assert relative_change(a, a) == 0.0
    assert correlation(a, a) == pytest.approx(1.0)
    assert correlation(a, 3 * a + 1) == pytest.approx(1.0)
    assert correlation(a, -a) == pytest.approx(-1.0)
    assert relative_change(a, 2 * a) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        relative_change(np.zeros(4), np.ones(4))
    with pytest.raises(UndefinedMetricError):
        correlation(np.ones(4), a.ravel()[:4])
    with pytest.raises(ValueError):
        correlation(np.ones(4), np.ones(5))


@settings(max_examples=50, deadline=None)
@given(a=arrays, b=arrays, scale=st.floats(0.1, 10.0), shift=st.floats(-5, 5))
def test_correlation_is_bounded_and_affine_invariant(a, b, scale, shift):
    r = correlation(a, b)
    assert -1.0 <= r <= 1.0
    assert correlation(a, scale * b + shift) == pytest.approx(r, abs=1e-9)
    assert correlation(b, a) == pytest.approx(r, abs=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_families_build_and_scale_with_width(family):
    shape = (3, 8, 8)
    small = build_family(family, 4, shape, 10)
    big = build_family(family, 8, shape, 10)
    assert nc.param_count(big) > nc.param_count(small)
    assert small.output_dim == 10


def test_residual_ablations_drop_components():
    with_all = build_family("residual", 4, (3, 8, 8), 10)
    no_bn = build_family("residual", 4, (3, 8, 8), 10, bn=False)
    no_skip = build_family("residual", 4, (3, 8, 8), 10, skip=False)
    assert nc.has_batchnorm(with_all) and not nc.has_batchnorm(no_bn)
    blocks = [l for l in no_skip.layers if isinstance(l, nc.ResidualBlock)]
    assert len(blocks) == 4 and not any(b.skip for b in blocks)
    with pytest.raises(ValueError):
        build_family("transformer", 4, (3, 8, 8), 10)


def test_width_sweep_rows_and_csv(tmp_path):
    ds = synth_dataset(3, 5, 20, 3.0, seed=0)
    cfg = SweepTrainConfig(epochs=2, lr=0.01, batch_size=16)
    rows = width_sweep("mlp2", [4, 16], ds, cfg, n_images=5, seeds=(0, 1))
    assert [(r["width"], r["seed"]) for r in rows] == [(4, 0), (4, 1), (16, 0), (16, 1)]
    for r in rows:
        assert -1 <= r["correlation"] <= 1 and r["rel_change"] >= 0
    means = mean_by_width(rows)
    assert set(means) == {4, 16}
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5


def test_width_sweep_is_reproducible():
    ds = synth_dataset(3, 5, 20, 3.0, seed=0)
    cfg = SweepTrainConfig(epochs=1, lr=0.01, batch_size=16)
    a = width_sweep("mlp2", [4], ds, cfg, n_images=4, seeds=(0,))
    b = width_sweep("mlp2", [4], ds, cfg, n_images=4, seeds=(0,))
    assert a[0]["correlation"] == b[0]["correlation"]


def test_failed_cell_is_recorded_not_raised(monkeypatch):
    import landprobe.ntkprobe as ntk

    real = ntk.sweep_cell

    def flaky(family, width, *args, **kw):
        if width == 4:
            raise nc.NumericError("diverged")
        return real(family, width, *args, **kw)

    monkeypatch.setattr(ntk, "sweep_cell", flaky)
    ds = synth_dataset(3, 5, 20, 3.0, seed=0)
    seen = []
    rows = width_sweep("mlp2", [4, 8], ds, SweepTrainConfig(epochs=1, batch_size=16), n_images=4, seeds=(0,),
                       on_row=seen.append)
    assert "diverged" in rows[0]["error"]
    assert "correlation" in rows[1]
    assert seen == rows


def test_width_sweep_rejects_unsorted_widths():
    ds = synth_dataset(3, 5, 20, 3.0, seed=0)
    with pytest.raises(ValueError):
        width_sweep("mlp2", [16, 4], ds, SweepTrainConfig(epochs=1))


def test_evolution_trace_when_checkpointing():
    ds = synth_dataset(3, 5, 20, 3.0, seed=0)
    cfg = SweepTrainConfig(epochs=3, lr=0.01, batch_size=16, checkpoints=True)
    rows = width_sweep("mlp2", [4], ds, cfg, n_images=4, seeds=(0,))
    assert [e["epoch"] for e in rows[0]["evolution"]] == [1, 2, 3]
