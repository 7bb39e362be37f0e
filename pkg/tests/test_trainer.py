import math

import numpy as np
import pytest
import torch

from dad.config import shapes_tiny
from dad.data import generate_shapes_dataset
from dad.evaluation import evaluate
from dad.inference import Predictor
from dad.losses import total_loss
from dad.model import build_model, load_checkpoint
from dad.trainer import NonFiniteLossError, RunLog, _TrainSet, lr_schedule_step, train

CFG = shapes_tiny().train


def _trace(losses, lr=1.0, cfg=CFG):
    """Learning rate in effect for each epoch after the first."""
    out = []
    for i in range(1, len(losses) + 1):
        lr = lr_schedule_step(losses[:i], lr, cfg)
        out.append(lr)
    return out


def test_schedule_decreasing_losses_keep_lr():
    assert _trace([5, 4, 3, 2, 1, 0.5, 0.25]) == [1.0] * 7


def test_schedule_flat_losses_halve_after_patience():
    # epochs 2 and 3 fail to improve on epoch 1: lr halves for epoch 4
    assert _trace([1.0, 1.0, 1.0]) == [1.0, 1.0, 0.5]


def test_schedule_two_plateaus_quarter_lr():
    assert _trace([1.0] * 5) == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_schedule_counter_resets_on_improvement():
    assert _trace([1.0, 1.0, 0.9, 0.9, 0.8]) == [1.0] * 5


def test_schedule_relative_tolerance():
    # an improvement smaller than 1e-4 relative counts as no improvement
    assert _trace([1.0, 1.0 - 5e-5, 1.0 - 9e-5]) == [1.0, 1.0, 0.5]
    assert _trace([1.0, 1.0 - 2e-4, 1.0 - 4e-4]) == [1.0, 1.0, 1.0]


def test_schedule_lr_never_increases():
    rng = np.random.default_rng(0)
    losses = list(rng.uniform(0.5, 1.5, 40))
    trace = _trace(losses)
    assert all(a >= b for a, b in zip(trace, trace[1:]))


def test_schedule_requires_history():
    with pytest.raises(ValueError):
        lr_schedule_step([], 1.0, CFG)


def test_adam_binding_on_quadratic_bowl():
    w = torch.tensor([3.0, -2.0, 1.5], requires_grad=True)
    opt = torch.optim.Adam([w], lr=0.1, betas=(CFG.beta1, CFG.beta2))
    start = float((w.detach() ** 2).sum())
    for _ in range(100):
        opt.zero_grad()
        (w ** 2).sum().backward()
        opt.step()
    assert float((w.detach() ** 2).sum()) < 1e-3 * start


def _small_profile(**train):
    p = shapes_tiny().with_overrides({
        "model": {"fpn_channels": 16, "head_depth": 1},
        "train": {"batch_size": 4, "max_epochs": 2, **train},
    })
    return p


@pytest.fixture(scope="module")
def tiny_data():
    tr, tr_img = generate_shapes_dataset(21, 12)
    va, va_img = generate_shapes_dataset(22, 6)
    return tr, tr_img, va, va_img


def _run(profile, data, out_dir=None):
    tr, tr_img, va, va_img = data
    model = build_model(profile.model, seed=profile.train.seed)
    best, log = train(model, tr, va, profile, out_dir=out_dir, train_images=tr_img,
                      val_images=va_img)
    return model, best, log


def test_zero_epochs_returns_initial_weights(tiny_data, tmp_path):
    p = _small_profile(max_epochs=0)
    init = build_model(p.model, seed=p.train.seed)
    model, best, log = _run(p, tiny_data, tmp_path)
    assert log.records == [] and log.best_epoch is None
    for k, v in init.state_dict().items():
        assert torch.equal(best[k], v)
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "runlog.jsonl").read_text() == ""


def test_training_is_deterministic(tiny_data):
    p = _small_profile(hflip=True)
    _, best_a, log_a = _run(p, tiny_data)
    _, best_b, log_b = _run(p, tiny_data)
    assert len(log_a.records) == 2
    for ra, rb in zip(log_a.records, log_b.records):
        for key in ("lr", "val_micro_auc", "val_recall"):
            if ra[key] is None:
                assert rb[key] is None
            else:
                assert ra[key] == pytest.approx(rb[key], abs=1e-6)
        for key, v in ra["train"].items():
            assert v == pytest.approx(rb["train"][key], abs=1e-6)
    for k in best_a:
        assert torch.allclose(best_a[k], best_b[k], atol=1e-6)


def test_artifacts_and_best_checkpoint_reproduce_auc(tiny_data, tmp_path):
    p = _small_profile(max_epochs=3)
    model, _, log = _run(p, tiny_data, tmp_path)
    assert sorted(f.name for f in tmp_path.glob("epoch_*.ckpt")) == [
        "epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt"]
    assert RunLog.read(tmp_path / "runlog.jsonl").records == log.records
    best = log.best_epoch
    recorded = next(r["val_micro_auc"] for r in log.records if r["epoch"] == best)
    assert recorded == max(r["val_micro_auc"] for r in log.records
                           if r["val_micro_auc"] is not None)
    loaded, meta = load_checkpoint(tmp_path / "best.ckpt", expected_config=p.model)
    assert meta["epoch"] == best
    _, _, va, va_img = tiny_data
    rep = evaluate(Predictor(loaded, p.anchors, p.decode, p.resize), va, p.eval, va_img)
    assert rep.micro_auc == recorded


def _grads_for(profile, data):
    tr, tr_img, _, _ = data
    model = build_model(profile.model, seed=0)
    ds = _TrainSet(tr, profile, tr_img)
    x, t = ds.batch(np.arange(4), np.zeros(4, bool))
    cls, box, attr = model(x).flatten()
    loss = total_loss(cls, box, attr, t, profile.train.loss_weights, profile.train.focal)
    loss.total.backward()
    return model


def test_attribute_weight_zero_isolates_attribute_head(tiny_data):
    model = _grads_for(_small_profile(loss_weights={"attr": 0.0}), tiny_data)
    for name, p in model.attr_head.named_parameters():
        assert p.grad is not None and not p.grad.any(), name
    assert any(p.grad.abs().sum() > 0 for p in model.class_head.parameters())
    model = _grads_for(_small_profile(), tiny_data)
    assert any(p.grad.abs().sum() > 0 for p in model.attr_head.parameters())


def test_non_finite_loss_aborts(tiny_data):
    p = _small_profile()
    tr, tr_img, va, va_img = tiny_data
    model = build_model(p.model, seed=0)
    with torch.no_grad():
        model.class_head.final.bias.fill_(math.nan)
    with pytest.raises(NonFiniteLossError, match="epoch 1"):
        train(model, tr, va, p, train_images=tr_img, val_images=va_img)


def test_empty_manifests_rejected(tiny_data):
    tr, tr_img, va, va_img = tiny_data
    p = _small_profile()
    with pytest.raises(ValueError):
        train(build_model(p.model, seed=0), tr.subset([]), va, p)
