import logging

import numpy as np
import pytest

from rcnet.data import PatchDataset, build_sources, validation_pairs
from rcnet.exceptions import DatasetError, ShapeMismatchError, StateError, TrainingDivergedError
from rcnet.model import build, layer_name
from rcnet.optim import (
    MISSING,
    SGDState,
    TrainLog,
    TrainLogEntry,
    evaluate_validation,
    loss_and_grad,
    lr_at,
    sgd_step,
    train,
)
from rcnet.schemas import CorruptionKind, CorruptionSpec, Mode, SGDHyper

from tests.conftest import smooth_image, tiny_net_config

PATCH = 13


@pytest.fixture
def dataset(rng):
    images = [(f"img{i}", smooth_image(rng, 30, 34)) for i in range(2)]
    sources = build_sources(images, CorruptionSpec(sigma=25), seed=1, patch_size=PATCH, stride=5)
    return PatchDataset(sources, PATCH)


def hyper(**updates):
    values = dict(lr0=0.01, momentum=0.9, weight_decay=1e-4, lr_drop_every=100,
                  lr_drop_factor=10.0, batch_size=2, max_iters=3)
    values.update(updates)
    return SGDHyper(**values)


# Расписание и шаг SGD


def test_lr_schedule():
    h = SGDHyper(lr0=0.1, lr_drop_every=150_000, lr_drop_factor=10.0)
    assert lr_at(0, h) == 0.1
    assert lr_at(149_999, h) == 0.1
    assert lr_at(150_000, h) == pytest.approx(0.01)
    assert lr_at(300_000, h) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_at(-1, h)


def test_sgd_hand_example():
    w = np.array([1.0])
    state = SGDState()
    h = hyper(lr0=0.1, weight_decay=1e-4)
    sgd_step({"w": w}, {"w": np.array([0.5])}, state, h)
    assert state.velocity["w"][0] == pytest.approx(0.5001)
    assert w[0] == pytest.approx(0.94999)
    sgd_step({"w": w}, {"w": np.array([0.5])}, state, h)
    assert state.velocity["w"][0] == pytest.approx(0.9 * 0.5001 + 0.5 + 1e-4 * 0.94999)
    assert w[0] == pytest.approx(0.94999 - 0.1 * (0.9 * 0.5001 + 0.5 + 1e-4 * 0.94999))
    assert state.iteration == 2


def test_sgd_matches_reference_update(rng):
    h = hyper(lr0=0.05, momentum=0.8, weight_decay=1e-3, lr_drop_every=4, lr_drop_factor=2.0)
    w = rng.normal(size=(3, 4))
    expected_w, expected_v = w.copy(), np.zeros_like(w)
    state = SGDState()
    for step in range(10):
        g = rng.normal(size=w.shape)
        sgd_step({"layer00.conv.weight": w}, {"layer00.conv.weight": g}, state, h)
        expected_v = h.momentum * expected_v + g + h.weight_decay * expected_w
        expected_w = expected_w - lr_at(step, h) * expected_v
    np.testing.assert_array_equal(w, expected_w)
    np.testing.assert_array_equal(state.velocity["layer00.conv.weight"], expected_v)


def test_normalization_parameters_skip_weight_decay():
    gamma = np.ones(3)
    weight = np.ones(3)
    h = hyper(weight_decay=1.0)
    sgd_step({"layer01.bn.gamma": gamma, "layer01.conv.weight": weight},
             {"layer01.bn.gamma": np.zeros(3), "layer01.conv.weight": np.zeros(3)}, SGDState(), h)
    np.testing.assert_array_equal(gamma, np.ones(3))
    assert np.all(weight < 1.0)


def test_sgd_step_errors():
    w = np.ones(2)
    with pytest.raises(StateError):
        sgd_step({"w": w}, {}, SGDState(), hyper())
    with pytest.raises(ShapeMismatchError):
        sgd_step({"w": w}, {"w": np.ones(3)}, SGDState(), hyper())


def test_loss_and_grad():
    out = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    target = np.array([0.0, 0.0]).reshape(1, 1, 1, 2)
    loss, grad = loss_and_grad(out, target)
    assert loss == 5.0
    np.testing.assert_array_equal(grad.ravel(), [1.0, 3.0])


# Журнал


def test_train_log_csv(tmp_path):
    log = TrainLog([
        TrainLogEntry(1, 0.1, 0.5),
        TrainLogEntry(2, 0.1, 0.25, val_loss=0.125, val_psnr=31.5),
    ])
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,lr,train_loss,val_loss,val_psnr"
    assert lines[1] == f"1,0.1,0.5,{MISSING},{MISSING}"
    restored = TrainLog.read_csv(path)
    assert restored.iterations() == [1, 2]
    assert restored.validated()[0].val_psnr == 31.5
    assert restored.until(1).iterations() == [1]


def test_train_log_rejects_non_increasing_iterations():
    log = TrainLog([TrainLogEntry(3, 0.1, 0.5)])
    with pytest.raises(ValueError):
        log.append(TrainLogEntry(3, 0.1, 0.4))


# Цикл обучения


def test_zero_iterations_changes_nothing(dataset):
    net = build(tiny_net_config(), 0)
    before = {k: v.copy() for k, v in net.named_buffers().items()}
    _, log = train(net, dataset, hyper(max_iters=0), 1)
    assert len(log) == 0
    assert all(np.array_equal(before[k], v) for k, v in net.named_buffers().items())


def test_empty_dataset():
    with pytest.raises(DatasetError):
        train(build(tiny_net_config(), 0), PatchDataset([], PATCH), hyper(), 1)


def test_training_is_deterministic(dataset):
    a, log_a = train(build(tiny_net_config(), 0), dataset, hyper(max_iters=4), 7)
    b, log_b = train(build(tiny_net_config(), 0), dataset, hyper(max_iters=4), 7)
    assert log_a.train_losses() == log_b.train_losses()
    assert log_a.iterations() == [1, 2, 3, 4]
    for name, value in a.named_buffers().items():
        assert np.array_equal(value, b.named_buffers()[name])


def test_resumed_training_matches_uninterrupted(dataset):
    full, _ = train(build(tiny_net_config(), 0), dataset, hyper(max_iters=6), 7)

    state = SGDState()
    part, _ = train(build(tiny_net_config(), 0), dataset, hyper(max_iters=3), 7, state=state)
    part, tail = train(part, dataset, hyper(max_iters=6), 7, state=state)
    assert tail.iterations() == [4, 5, 6]
    assert state.iteration == 6
    for name, value in full.named_buffers().items():
        assert np.array_equal(value, part.named_buffers()[name])
    for name, value in full.named_statistics().items():
        assert np.array_equal(value, part.named_statistics()[name])


def test_divergence_is_reported(dataset):
    net = build(tiny_net_config(), 0)
    net.named_buffers()[f"{layer_name(0)}.conv.weight"][0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(net, dataset, hyper(), 1)
    assert info.value.iteration == 1
    assert info.value.exit_code == 3


def test_validation_and_progress_lines(dataset, rng, caplog):
    images = [("val", smooth_image(rng, 20, 20))]
    pairs = validation_pairs(images, CorruptionSpec(sigma=25), seed=1)
    net = build(tiny_net_config(), 0)
    progress_log = logging.getLogger("tests.progress")
    with caplog.at_level(logging.INFO, logger="tests.progress"):
        _, log = train(net, dataset, hyper(max_iters=4), 1, progress_log,
                       validation=pairs, val_every=2, log_every=100)
    assert [e.iteration for e in log.validated()] == [2, 4]
    assert all(e.val_psnr > 0 for e in log.validated())
    lines = [r.getMessage() for r in caplog.records if r.name == "tests.progress"]
    assert lines[0].startswith("iter=2 lr=0.01 loss=")
    assert "val_psnr=" in lines[0]
    assert net.mode == Mode.TRAIN


def test_evaluate_validation_keeps_eval_mode(rng):
    pairs = validation_pairs([("val", smooth_image(rng, 20, 20))], CorruptionSpec(sigma=15), seed=2)
    net = build(tiny_net_config(), 0).eval_mode()
    loss, value = evaluate_validation(net, pairs)
    assert loss > 0 and np.isfinite(value)
    assert net.mode == Mode.EVAL


def test_checkpoint_hook(dataset):
    seen = []
    train(build(tiny_net_config(), 0), dataset, hyper(max_iters=5), 1,
          on_checkpoint=lambda net, state: seen.append(state.iteration), checkpoint_every=2)
    assert seen == [2, 4]


def single_patch_dataset(rng, corruption, size):
    images = [("one", smooth_image(rng, size + 1, size + 1))]
    sources = build_sources(images, corruption, seed=1, patch_size=size, stride=size + 1, resample_noise=False)
    assert sum(len(pair.positions) for pair in sources[0].pairs) == 1
    return PatchDataset(sources, size)


def test_overfits_single_patch(rng):
    dataset = single_patch_dataset(rng, CorruptionSpec(sigma=25), PATCH)
    _, log = train(build(tiny_net_config(), 0), dataset,
                   hyper(lr0=0.01, weight_decay=0.0, max_iters=200, batch_size=1), 3)
    losses = log.train_losses()
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_overfit_reduces_loss_hundredfold(rng):
    corruption = CorruptionSpec(kind=CorruptionKind.SR, scale=2)
    dataset = single_patch_dataset(rng, corruption, 41)
    _, log = train(build(tiny_net_config(), 0), dataset,
                   hyper(lr0=0.01, weight_decay=0.0, lr_drop_every=1000, max_iters=2000, batch_size=1), 3)
    losses = log.train_losses()
    assert np.mean(losses[-20:]) < 0.01 * losses[0]
