import filecmp
import os

import numpy as np
import pytest

from gridpeft import tensor as T
from gridpeft.errors import ConfigError, FormatError
from gridpeft.tasks import (
    SIGMA_FLOOR,
    GridSpec,
    gaussian_correction,
    gen_downscale,
    gen_ensemble,
    gen_precip,
    generate,
    latitude_weights,
    load_dataset,
    save_dataset,
)


def test_latitude_weight_examples():
    assert np.array_equal(latitude_weights([0.0, 0.0, 0.0]), np.ones(3))
    w = latitude_weights([0.0, 60.0])
    assert np.allclose(w, [2 / 1.5, 1 / 1.5], atol=1e-12)
    assert round(w[0], 4) == 1.3333 and round(w[1], 4) == 0.6667
    g = GridSpec(32, 64)
    w = latitude_weights(g)
    assert abs(w.mean() - 1.0) < 1e-12 and abs(w.sum() - 32) < 1e-10


def test_latitude_weight_errors():
    with pytest.raises(ConfigError):
        latitude_weights([90.0, 0.0])
    with pytest.raises(ConfigError):
        GridSpec(4, 4, lat=(0.0, 1.0))


def test_default_grid_excludes_poles():
    g = GridSpec(8, 16)
    assert g.lat[0] == -78.75 and g.lat[-1] == 78.75
    assert g.lon[1] == 22.5


def test_constant_field_has_zero_residual():
    truth = np.full((1, 1, 32, 32), 2.5)
    coarse = T.avg_pool_2d(truth, 4).data
    up = T.bilinear_upsample_2d(coarse, 4).data
    assert np.array_equal(coarse, np.full((1, 1, 8, 8), 2.5))
    assert np.allclose(up, truth, atol=1e-14) and np.allclose(truth - up, 0, atol=1e-14)


def test_ramp_survives_pool_and_upsample():
    lon = np.arange(32.0)
    ramp = np.broadcast_to(10.0 + lon, (1, 1, 32, 32))
    up = T.bilinear_upsample_2d(T.avg_pool_2d(ramp, 4).data, 4).data
    interior = (slice(None), slice(None), slice(4, -4), slice(4, -4))
    rel = np.abs(up[interior] - ramp[interior]) / np.abs(ramp[interior])
    assert rel.max() < 0.02


def test_downscale_determinism_and_consistency(tmp_path):
    a, b = gen_downscale(3, 20), gen_downscale(3, 20)
    assert a.equals(b)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for name in os.listdir(tmp_path / "a"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    assert T.avg_pool_2d(a.targets, 4).data.tobytes() == a.extras["coarse"].tobytes()
    assert a.inputs.shape == (20, 3, 32, 32) and (a.train_end, a.val_end) == (16, 18)
    assert not gen_downscale(4, 20).equals(a)


def test_samples_do_not_depend_on_dataset_size():
    small, big = gen_downscale(1, 10), gen_downscale(1, 30)
    assert small.targets.tobytes() == big.targets[:10].tobytes()


def test_source_variant_differs():
    assert not np.array_equal(gen_downscale(0, 5).targets, gen_downscale(0, 5, source=True).targets)


def test_downscale_indivisible_grid():
    with pytest.raises(ConfigError):
        gen_downscale(0, 4, grid=GridSpec(30, 32))


def test_train_split_normalization():
    for ds in (gen_downscale(0, 30), gen_ensemble(0, 30), gen_precip(0, 30)):
        x = ds.normalized_inputs(slice(0, ds.train_end))
        m = x.mean(axis=(0, 2, 3))
        s = x.std(axis=(0, 2, 3))
        varying = ds.inputs[: ds.train_end].std(axis=(0, 2, 3)) > 1e-12
        assert np.all(np.abs(m) < 1e-10)
        assert np.all(np.abs(s[varying] - 1) < 1e-10)


def test_ensemble_without_bias_or_noise():
    ds = gen_ensemble(0, 4, bias_scale=0.0, bias_noise=0.0, noise_std=0.0)
    assert np.all(ds.extras["ens_std"] == SIGMA_FLOOR)
    assert np.allclose(ds.extras["ens_mean"], ds.targets, atol=1e-14, rtol=0)


def test_ensemble_spread_statistic():
    s, m = 0.4, 10
    ds = gen_ensemble(1, 40, members=m, bias_scale=0.0, bias_noise=0.0, noise_std=s, noise_variation=0.0)
    corrected = ds.extras["ens_std"].mean() * np.sqrt(m / (m - 1))
    assert abs(corrected / s - 1) < 0.05


def test_ensemble_layout_and_errors():
    ds = gen_ensemble(2, 10)
    assert ds.inputs.shape == (10, 4, 32, 32) and ds.targets.shape == (10, 2, 32, 32)
    assert np.array_equal(ds.inputs[:, :2], ds.extras["ens_mean"])
    assert np.all(ds.extras["ens_std"] >= SIGMA_FLOOR)
    assert np.all(np.abs(ds.extras["efi"]) <= 1)
    assert gen_ensemble(2, 10).equals(ds)
    with pytest.raises(ConfigError):
        gen_ensemble(0, 2, members=1)


def test_gaussian_correction_examples():
    mu, sigma = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    m, s = gaussian_correction(0.0, 0.0, mu, sigma)
    assert np.array_equal(m, mu) and np.array_equal(s, sigma)
    _, s = gaussian_correction(0.0, np.log(2.0), mu, sigma)
    assert np.allclose(s, 2 * sigma, rtol=1e-15)
    _, s = gaussian_correction(0.0, np.array([-700.0, 50.0]), mu, sigma)
    assert np.all(s > 0)
    m, s = gaussian_correction(T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), mu, sigma)
    assert np.array_equal(m.data, mu + sigma) and np.array_equal(s.data, sigma)


def test_precip_still_air_is_persistent():
    ds = gen_precip(0, 5, wind_max=0.0, diffusion=0.0)
    for lead in range(3):
        assert np.array_equal(ds.targets[:, lead], ds.inputs[:, 0])


def test_precip_sparsity_over_many_seeds():
    for seed in range(100):
        ds = gen_precip(seed, 3)
        assert np.mean(ds.targets == 0.0) >= 0.5, seed
        assert np.all(ds.targets >= 0)
    assert gen_precip(7, 4).equals(gen_precip(7, 4))


def test_round_trip_and_variable_order(tmp_path):
    for task in ("downscale", "ensemble", "precip"):
        ds = generate(task, 5, 10)
        save_dataset(ds, tmp_path / task)
        back = load_dataset(tmp_path / task)
        assert back.equals(ds)
        assert back.variables == ds.variables
    with pytest.raises(ConfigError):
        generate("nowcast", 0)


def test_manifest_grid_mismatch(tmp_path):
    save_dataset(gen_precip(0, 4), tmp_path)
    manifest = tmp_path / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("H = 32", "H = 16"))
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_corrupt_tensor_file(tmp_path):
    save_dataset(gen_precip(0, 4), tmp_path)
    path = tmp_path / "inputs.wpft"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_non_finite_inputs_rejected():
    ds = gen_precip(0, 4)
    bad = ds.inputs.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ConfigError):
        type(ds)(ds.task, bad, ds.targets, ds.variables, ds.target_names, ds.grid, 0, 3, 4)
