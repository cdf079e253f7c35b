import json
import math

import numpy as np
import pytest

import danp


def test_metric_values():
    assert danp.gaussian_loglik(0.0, 0.0, 0.1) == pytest.approx(1.38364, abs=1e-5)
    assert danp.crps_gaussian(0.0, 0.0, 1.0) == pytest.approx(0.23370, abs=1e-5)
    assert danp.kl_diag_gaussians([1.0], [1.0], [0.0], [1.0]) == pytest.approx(0.5)
    assert danp.log_mean_exp([-1.0, -3.0]) == pytest.approx(-1.5663, abs=1e-4)
    with pytest.raises(danp.ContractError):
        danp.gaussian_loglik(0.0, 0.0, 0.0)


def test_bo_helpers():
    assert danp.expected_improvement(1.0, 1.0, 1.0) == pytest.approx(0.39894, abs=1e-5)
    assert danp.ackley([0.0, 0.0]) == 0.0
    assert danp.rastrigin([0.0, 0.0, 0.0]) == 0.0
    assert danp.cosine_objective([0.0, 0.0]) == pytest.approx(-2.0)


def test_kernels_and_tasks():
    assert danp.kernel("rbf", [0.0], [1.0], s=1.0, ell=1.0) == pytest.approx(math.exp(-0.5))
    assert danp.kernel("matern52", [0.0], [1.0], s=1.0, ell=1.0) == pytest.approx(0.52399, abs=1e-5)
    t = danp.sample_gp_task(2, d_y=3, seed=4)
    assert t["x"].shape[1] == 2 and t["y"].shape[1] == 3
    assert len(t["context"]) + len(t["targets"]) == t["x"].shape[0]
    again = danp.sample_gp_task(2, d_y=3, seed=4)
    np.testing.assert_array_equal(t["y"], again["y"])


def test_config_validation():
    full = json.loads(danp.validate_config('{"model": {"d_r": 16}}'))
    assert full["model"]["d_r"] == 16
    assert "clip_norm" in full["train"]
    with pytest.raises(danp.ConfigError, match="model.d_rr"):
        danp.validate_config('{"model": {"d_rr": 16}}')


def test_checkpoint_round_trip_and_predict(tmp_path):
    cfg = json.dumps({"model": {"d_r": 8, "det_hidden": 16, "det_layers": 1, "det_heads": 2,
                                "lat_hidden": 8, "lat_layers": 1, "lat_mlp_hidden": 8}})
    ck = danp.new_checkpoint(cfg, seed=3)
    path = str(tmp_path / "m.ckpt")
    ck.save(path)
    back = danp.load_checkpoint(path)
    assert back.keys == ck.keys
    for key in ck.keys:
        np.testing.assert_array_equal(back.param(key), ck.param(key))

    rng = np.random.default_rng(0)
    xc, yc, xt = rng.uniform(-2, 2, (6, 3)), rng.normal(size=(6, 2)), rng.uniform(-2, 2, (4, 3))
    mu, sd = back.predict(xc, yc, xt, K=5, seed=1)
    assert mu.shape == (4, 2) and sd.shape == (4, 2)
    assert np.all(sd >= 0.1 - 1e-6)
    mu2, _ = back.predict(xc, yc, xt, K=5, seed=1)
    np.testing.assert_array_equal(mu, mu2)


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(danp.CheckpointError, match="not a DANP checkpoint"):
        danp.load_checkpoint(str(path))
