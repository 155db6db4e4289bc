import json
import math

import numpy as np
import pytest

from kavan import harness as hz
from kavan import tensor as tc
from kavan.data import GifSample, SyntheticConfig, default_taxonomy, generate_synthetic
from kavan.errors import ConfigurationError, NumericAbort
from kavan.model import KavanParams
from kavan.tensor import Tensor

SMALL = {"model": {"D": 8, "d": 8}, "optimizer": {"steps": 20, "batch_size": 4}}


def small_cfg(**over):
    d = json.loads(json.dumps(SMALL))
    for key, value in over.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return hz.RunConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(6, SyntheticConfig(seed=21))


# -- config --------------------------------------------------------------------------


def test_config_round_trip():
    cfg = small_cfg(seed=7)
    assert hz.RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "bad",
    [
        {"nope": 1},
        {"optimizer": {"name": "rmsprop"}},
        {"optimizer": {"lr": -1.0}},
        {"model": {"temporal": "gru"}},
        {"loss": 3},
        {"sampling": "middle"},
    ],
)
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        hz.RunConfig.from_dict(bad)


def test_missing_paths_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        hz.RunConfig(data=str(tmp_path / "missing.jsonl")).check_paths()


# -- optimizers ------------------------------------------------------------------------


def test_sgd_step_is_exact():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.25])
    hz.SGD([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 0.3]), requires_grad=True)
    p.grad = np.array([3.0, -0.01, 40.0])
    hz.Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.29], rtol=0, atol=1e-8)


def test_cosine_schedule_endpoints():
    cfg = hz.OptimizerConfig(lr=0.2, steps=11, schedule="cosine")
    assert hz.learning_rate(cfg, 0) == 0.2
    assert abs(hz.learning_rate(cfg, 5) - 0.1) < 1e-15
    assert abs(hz.learning_rate(cfg, 10)) < 1e-15
    assert hz.learning_rate(hz.OptimizerConfig(lr=0.2, schedule="constant"), 7) == 0.2


def test_clip_gradients_caps_global_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert hz.clip_gradients([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-15)
    a.grad = np.array([3.0, 0.0])
    hz.clip_gradients([a], 0.0)
    assert a.grad.tolist() == [3.0, 0.0]


# -- training ---------------------------------------------------------------------------


def test_training_is_deterministic(tiny_data):
    cfg = small_cfg(shuffle=True)
    p1, r1 = hz.train(cfg, tiny_data)
    p2, r2 = hz.train(cfg, tiny_data)
    for (_, a), (_, b) in zip(p1.named_parameters(), p2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert json.dumps(r1) == json.dumps(r2)


def test_dataset_order_does_not_matter(tiny_data):
    cfg = small_cfg(optimizer={"steps": 5})
    p1, _ = hz.train(cfg, tiny_data)
    p2, _ = hz.train(cfg, tiny_data[::-1])
    for (_, a), (_, b) in zip(p1.named_parameters(), p2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_keypoint_weight_only_matters_after_first_step(tiny_data):
    runs = []
    for w in (0.0, 1.0):
        history = []
        hz.train(small_cfg(loss={"w_kp": w}, optimizer={"steps": 3}), tiny_data, history=history)
        runs.append(history)
    zero, one = runs
    for key in ("nmse", "ce", "rank", "kp"):
        assert zero[0][key] == one[0][key]
    assert zero[0]["total"] != one[0]["total"]
    assert zero[1]["nmse"] != one[1]["nmse"]


def test_training_reduces_loss(tiny_data):
    history = []
    hz.train(small_cfg(optimizer={"steps": 150}), tiny_data, history=history)
    assert history[-1]["total"] < 0.5 * history[0]["total"]


def test_nan_loss_aborts_with_diagnostic(tiny_data):
    cfg = small_cfg()
    params = KavanParams.init(cfg.model, cfg.seed)
    params.W_reg.data[0, 0] = np.nan
    with pytest.raises(NumericAbort) as info:
        hz.train(cfg, tiny_data, params=params)
    assert info.value.step == 0
    assert "nmse" in info.value.components and "step 0" in str(info.value)


def test_empty_training_set_rejected():
    with pytest.raises(ConfigurationError):
        hz.train(small_cfg(), [])


def test_attention_learns_to_follow_keypoints(tiny_data):
    history = []
    cfg = small_cfg(loss={"w_kp": 10.0}, optimizer={"steps": 200, "lr": 0.01})
    hz.train(cfg, tiny_data, history=history)
    assert history[-1]["kp"] < 0.1 * history[0]["kp"]


# -- evaluation --------------------------------------------------------------------------


def test_oracle_injection_scores_zero_nmse(tiny_data):
    cfg = small_cfg()
    prepared = hz.prepare(tiny_data, cfg, default_taxonomy())
    Y = np.stack([p.intensities for p in prepared])
    logits = np.eye(4)[[p.category for p in prepared]]
    masks = np.full((len(prepared), cfg.model.frames, 49), 1 / 49)
    m = hz.compute_metrics(Y, logits, masks, prepared, cfg.model.frames)
    assert m["nmse"] == 0.0 and m["accuracy"] == 1.0 and m["mean_rank_violations"] == 0.0


def test_random_parameters_score_near_chance():
    cfg = small_cfg()
    accs = []
    for seed in range(5):
        data = generate_synthetic(80, SyntheticConfig(seed=100 + seed))
        params = KavanParams.init(cfg.model, seed)
        accs.append(hz.evaluate(params, data, cfg=cfg)["average"]["accuracy"])
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_report_average_is_mean_of_splits():
    rng = np.random.default_rng(0)
    splits = [{k: float(rng.uniform()) for k in hz.METRIC_KEYS} for _ in range(5)]
    avg = hz.metrics_report(splits)["average"]
    for k in hz.METRIC_KEYS:
        assert abs(avg[k] - np.mean([s[k] for s in splits])) < 1e-12


def test_cross_validation_report(tiny_data):
    data = generate_synthetic(10, SyntheticConfig(seed=3))
    report = hz.cross_validate(small_cfg(optimizer={"steps": 2}), data, n_splits=2)
    assert [s["split"] for s in report["splits"]] == [0, 1]
    assert all(s["n"] == 2 for s in report["splits"])


# -- gradient check -----------------------------------------------------------------------


def test_gradcheck_passes_on_tiny_model():
    report = hz.gradcheck()
    assert report.passed, report
    assert report.n_checked > 100 and report.runtime < 60


def test_gradcheck_catches_a_corrupted_adjoint(monkeypatch):
    monkeypatch.setattr(tc, "_dtanh", lambda y: 1.0 - y)
    report = hz.gradcheck()
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_relative_error_floor():
    assert hz.relative_error(1e-9, 3e-9) == pytest.approx(2e-9 / hz.GRAD_FLOOR)
    assert hz.relative_error(2.0, 1.0) == 0.5
    assert math.isfinite(hz.relative_error(0.0, 0.0))


# -- mask export ---------------------------------------------------------------------------


def test_dump_masks_writes_two_files_per_frame(tmp_path, tiny_data):
    cfg = small_cfg()
    params = KavanParams.init(cfg.model, 0)
    files = hz.dump_masks(params, cfg, tiny_data[0], tmp_path)
    assert len(files) == 2 * cfg.model.frames
    for path in files:
        if path.suffix == ".json":
            payload = json.loads(path.read_text())
            assert abs(np.sum(payload["mask"]) - 1) < 1e-9
            assert abs(np.sum(payload["heatmap"]) - 1) < 1e-9
        else:
            assert path.read_bytes().startswith(b"P5\n")


def test_keypoint_free_frames_dump_uniform_heatmaps(tmp_path):
    cfg = small_cfg()
    frames = np.random.default_rng(0).uniform(size=(8, 64, 64))
    sample = GifSample("blank", np.linspace(-1, 1, 17), [[] for _ in range(8)], frames=frames)
    files = hz.dump_masks(KavanParams.init(cfg.model, 0), cfg, sample, tmp_path)
    for path in files:
        if path.suffix == ".json":
            assert np.all(np.array(json.loads(path.read_text())["heatmap"]) == 1 / 49)
