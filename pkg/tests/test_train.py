"""Optimizer arithmetic, loop determinism, and full-volume evaluation."""

import numpy as np
import pytest

import rsaseg.data as D
import rsaseg.network as N
import rsaseg.tensor as T
import rsaseg.train as TR
from rsaseg.errors import EmptyInput, ShapeMismatch


def param(values):
    return T.parameter(np.asarray(values, dtype=np.float32))


# -------------------------------------------------------------------- adam

def test_first_step_moves_by_learning_rate():
    params = {"w": param([1.0])}
    state = TR.AdamState(lr=1e-3, weight_decay=0.0)
    TR.adam_step(params, {"w": np.array([1.0], np.float32)}, state)
    assert params["w"].data[0] == pytest.approx(0.999, abs=1e-6)
    assert state.step == 1


def test_zero_grad_zero_decay_leaves_parameter():
    params = {"w": param([5.0])}
    TR.adam_step(params, {"w": np.zeros(1, np.float32)},
                 TR.AdamState(weight_decay=0.0))
    assert params["w"].data[0] == 5.0


def test_equal_gradients_update_equally():
    params = {"a": param([2.0]), "b": param([2.0])}
    grads = {"a": np.array([3.0], np.float32), "b": np.array([3.0], np.float32)}
    TR.adam_step(params, grads, TR.AdamState(weight_decay=0.0))
    assert params["a"].data[0] == params["b"].data[0]


def test_weight_decay_pulls_toward_zero():
    wd = {"w": param([1.0])}
    plain = {"w": param([1.0])}
    TR.adam_step(wd, {"w": np.zeros(1, np.float32)}, TR.AdamState(weight_decay=0.1))
    TR.adam_step(plain, {"w": np.zeros(1, np.float32)}, TR.AdamState(weight_decay=0.0))
    assert wd["w"].data[0] < plain["w"].data[0]


def test_adam_shape_mismatch():
    params = {"w": param([1.0, 2.0])}
    with pytest.raises(ShapeMismatch):
        TR.adam_step(params, {"w": np.zeros(3, np.float32)}, TR.AdamState())


def test_moment_buffers_track_parameters():
    params = {"w": param([[1.0, 2.0], [3.0, 4.0]])}
    state = TR.AdamState()
    TR.adam_step(params, {"w": np.ones((2, 2), np.float32)}, state)
    assert state.m["w"].shape == (2, 2)
    assert state.v["w"].shape == (2, 2)
    TR.adam_step(params, {"w": np.ones((2, 2), np.float32)}, state)
    assert state.step == 2


def test_train_config_defaults():
    cfg = TR.TrainConfig()
    assert (cfg.iterations, cfg.batch_size) == (800, 4)
    assert cfg.lr == 1e-3 and cfg.weight_decay == 1e-5
    assert cfg.crop_size == (32, 32, 16)


# -------------------------------------------------------------------- loop

@pytest.fixture(scope="module")
def toy_data():
    return [D.generate_phantom(s, dims=(16, 16, 16), lesion_rate_target=5e-3,
                               channels=2, sample_id=f"t{s}")
            for s in range(3)]


def small_net(seed=0):
    cfg = N.UNetConfig(levels=2, base_channels=2, in_channels=2,
                       block_kind="rsa", placement="010")
    return N.build_network(cfg, seed=seed)


def test_zero_iterations_checkpoints_initialization(tmp_path, toy_data):
    net = small_net(seed=1)
    init = {n: p.data.copy() for n, p in net.named_parameters()}
    cfg = TR.TrainConfig(iterations=0, crop_size=(8, 8, 8), lesion_rate=5e-3)
    history = TR.train_loop(net, toy_data, cfg, out_dir=tmp_path / "run")
    assert history == []
    back = N.load_checkpoint(tmp_path / "run" / "checkpoint")
    for name, p in back.named_parameters():
        assert np.array_equal(p.data, init[name]), name
    header = (tmp_path / "run" / "history.csv").read_text().splitlines()
    assert header == ["iteration,loss"]


def test_loop_is_deterministic_and_records_every_iteration(toy_data):
    cfg = TR.TrainConfig(iterations=6, batch_size=2, seed=3,
                         crop_size=(8, 8, 8), lesion_rate=5e-3)
    net_a, net_b = small_net(), small_net()
    hist_a = TR.train_loop(net_a, toy_data, cfg)
    hist_b = TR.train_loop(net_b, toy_data, cfg)
    assert hist_a == hist_b
    assert [it for it, _ in hist_a] == list(range(1, 7))
    assert all(np.isfinite(v) for _, v in hist_a)
    for (name, a), (_, b) in zip(net_a.named_parameters(), net_b.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    # a different seed takes a different path
    hist_c = TR.train_loop(small_net(), toy_data,
                           TR.TrainConfig(iterations=6, batch_size=2, seed=4,
                                          crop_size=(8, 8, 8), lesion_rate=5e-3))
    assert hist_c != hist_a


def test_loss_trends_down_on_toy_volumes(toy_data):
    cfg = TR.TrainConfig(iterations=60, batch_size=2, seed=0,
                         crop_size=(8, 8, 8), lesion_rate=5e-3)
    history = TR.train_loop(small_net(), toy_data, cfg)
    first = np.mean([v for _, v in history[:10]])
    last = np.mean([v for _, v in history[-10:]])
    assert last < first


def test_empty_dataset_rejected():
    with pytest.raises(EmptyInput):
        TR.train_loop(small_net(), [], TR.TrainConfig(iterations=1))
    with pytest.raises(EmptyInput):
        TR.evaluate(small_net(), [])


# -------------------------------------------------------------------- eval

def test_evaluate_handles_indivisible_extents(toy_data):
    odd = D.generate_phantom(5, dims=(15, 14, 13), lesion_rate_target=5e-3,
                             channels=2, sample_id="odd")
    report = TR.evaluate(small_net(), [odd])
    assert np.isfinite(report.voxel_avg_dice)
    assert report.per_sample[0][0] == "odd"


def test_evaluate_untrained_net_reports_finite_scores(toy_data):
    report = TR.evaluate(small_net(), toy_data)
    assert 0.0 <= report.voxel_avg_dice <= 1.0
    assert len(report.per_sample) == len(toy_data)


def test_predict_volume_shape(toy_data):
    mask = TR.predict_volume(small_net(), toy_data[0].image)
    assert mask.shape == (16, 16, 16)
    assert mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 1}
