import math

import numpy as np
import pytest

from selective_ssm import training as tr
from selective_ssm.mixers import block_to_json, block_from_json
from selective_ssm.tasks import TaskConfig, evaluate_accuracy, make_dataset, stack


def test_zero_gradient_leaves_params_unchanged():
    p = {"w": np.array([1.0, -2.0])}
    new, state = tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState(), lr=0.1)
    assert np.array_equal(new["w"], p["w"]) and state.step == 1


def test_first_step_is_signed_learning_rate():
    p = {"w": np.array([0.5, 0.5, 0.5])}
    g = {"w": np.array([3.0, -1e-3, 40.0])}
    new, _ = tr.adam_step(p, g, tr.AdamState(), lr=0.01)
    assert np.allclose(new["w"] - p["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)


def reference_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Element-by-element Adam written with Python floats."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            x[i] = x[i] - lr * mh / (math.sqrt(vh) + eps)
        path.append(list(x))
    return path


def test_quadratic_trajectory_matches_reference():
    A = np.diag([1.0, 4.0, 0.25])
    c = np.array([1.0, -2.0, 3.0])
    grad = lambda x: A @ (np.asarray(x) - c)
    x0 = np.array([5.0, 5.0, -5.0])
    ref = reference_adam(x0, lambda x: list(grad(x)), 100, lr=0.05)
    p, state = {"x": x0}, tr.AdamState()
    for k in range(100):
        p, state = tr.adam_step(p, {"x": grad(p["x"])}, state, lr=0.05)
        assert np.max(np.abs(p["x"] - np.array(ref[k]))) <= 1e-10


def test_quadratic_trajectory_matches_torch():
    torch = pytest.importorskip("torch")
    A = np.array([[2.0, 0.3], [0.3, 0.5]])
    c = np.array([-1.0, 2.0])
    x0 = np.array([3.0, -4.0])
    xt = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([xt], lr=0.03, betas=(0.9, 0.999), eps=1e-8)
    At, ct = torch.tensor(A), torch.tensor(c)
    p, state = {"x": x0}, tr.AdamState()
    for _ in range(100):
        opt.zero_grad()
        loss = 0.5 * (xt - ct) @ At @ (xt - ct)
        loss.backward()
        opt.step()
        p, state = tr.adam_step(p, {"x": A @ (p["x"] - c)}, state, lr=0.03)
        assert np.max(np.abs(p["x"] - xt.detach().numpy())) <= 1e-10


def test_nan_gradient_is_reported():
    with pytest.raises(FloatingPointError, match="w"):
        tr.adam_step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])}, tr.AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        tr.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, tr.AdamState(), lr=0.1)


def test_cosine_schedule_values():
    cfg = tr.OptimConfig(epochs=101)
    assert tr.cosine_lr(0, cfg) == 0.03
    assert tr.cosine_lr(100, cfg) == pytest.approx(1e-6, abs=1e-18)
    assert tr.cosine_lr(50, cfg) == pytest.approx((0.03 + 1e-6) / 2, rel=1e-14)
    lrs = [tr.cosine_lr(e, cfg) for e in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        tr.cosine_lr(101, cfg)


def test_optim_config_invariants():
    with pytest.raises(ValueError):
        tr.OptimConfig(lr_init=1e-3, lr_final=1e-2)
    with pytest.raises(ValueError):
        tr.OptimConfig(epochs=0)
    desk = tr.OptimConfig.desk()
    assert (desk.epochs, desk.batch_size, desk.wall_clock_budget) == (300, 64, 1800.0)
    assert tr.DatasetSizes.full().train == 100_000


def test_parameter_count_matches_table():
    task = TaskConfig("keep_nth", T=50, vocab_size=128, n=5)
    block = tr.make_model("mamba", task, 32, 8, pe=True, simplified=True)
    assert abs(block.n_parameters() - 9200) <= 0.05 * 9200
    back = block_from_json(block_to_json(block))
    assert sum(v.size for v in back.params.values()) == block.n_parameters()


def test_initialization_ranges():
    block = tr.init_block("mamba", 20, 16, 4, 21, pe=False, simplified=False, seed=0)
    lam = block.params["lam"]
    assert lam.min() >= 1e-3 and lam.max() <= 1e-1
    from selective_ssm.tensor_core import np_softplus
    assert np.allclose(np_softplus(block.params["delta.b"]), 1.0)
    bound = 1 / math.sqrt(16)
    assert np.abs(block.params["B.w"]).max() <= bound
    assert block.delta_rank == 1


def small_task():
    return TaskConfig("keep_nth", T=6, vocab_size=4, n=1, seed=3)


def small_sizes():
    return tr.DatasetSizes(train=64, val=32, test=32)


def test_zero_learning_rate_keeps_parameters():
    task = small_task()
    block = tr.make_model("mamba", task, 6, 2, pe=True, simplified=True, seed=1)
    init_acc = evaluate_accuracy(block, make_dataset(task, 32, "test"))
    final, rec = tr.train(block, task, tr.OptimConfig(lr_init=0.0, lr_final=0.0, epochs=2, batch_size=16),
                          small_sizes())
    for k in block.params:
        assert np.allclose(final.params[k], block.params[k], rtol=1e-15, atol=0)
    assert rec.test_accuracy == init_acc


def test_early_stop_on_zero_loss_task():
    X = np.ones((40, 5), dtype=np.int64)
    Y = np.ones((40, 5), dtype=np.int64)
    M = np.ones((40, 5), dtype=bool)
    data = {"train": (X, Y, M), "val": (X, Y, M), "test": (X, Y, M)}
    block = tr.init_block("mamba", 3, 4, 2, 3, seed=0)
    block.params["out.w"][:] = 0
    block.params["out.b"][:] = [0.0, 50.0, 0.0]
    _, rec = tr.train(block, None, tr.OptimConfig(epochs=50, batch_size=8), small_sizes(), data=data)
    assert rec.stop_reason == "val_loss" and rec.epochs_run <= 2
    assert rec.test_accuracy == 1.0


def test_training_reduces_loss_and_records_everything():
    task = small_task()
    block = tr.make_model("mamba", task, 8, 2, pe=True, simplified=True, seed=0)
    _, rec = tr.train(block, task, tr.OptimConfig(epochs=6, batch_size=16, lr_init=0.02), small_sizes())
    assert rec.epochs_run == 6 and rec.stop_reason == "epochs"
    assert rec.train_loss[-1] < rec.train_loss[0]
    assert len(rec.val_loss) == len(rec.val_accuracy) == 6
    assert rec.n_parameters == block.n_parameters()
    assert rec.config["optim"]["epochs"] == 6 and rec.config["task"]["kind"] == "keep_nth"


def test_training_is_deterministic():
    task = small_task()
    runs = []
    for _ in range(2):
        block = tr.make_model("s4d", task, 6, 2, pe=True, simplified=True, seed=4)
        final, rec = tr.train(block, task, tr.OptimConfig(epochs=3, batch_size=16, seed=7), small_sizes())
        runs.append((final, rec))
    (fa, ra), (fb, rb) = runs
    assert ra.train_loss == rb.train_loss and ra.val_loss == rb.val_loss
    assert block_to_json(fa) == block_to_json(fb)


def test_target_accuracy_and_budget_stops():
    task = small_task()
    block = tr.make_model("mamba", task, 6, 2, pe=True, simplified=True, seed=1)
    _, rec = tr.train(block, task, tr.OptimConfig(epochs=5, target_val_accuracy=0.0), small_sizes())
    assert rec.stop_reason == "val_accuracy" and rec.epochs_run == 1
    _, rec = tr.train(block, task, tr.OptimConfig(epochs=5, wall_clock_budget=0.0), small_sizes())
    assert rec.stop_reason == "budget" and rec.epochs_run == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_carries_checkpoint():
    task = small_task()
    block = tr.make_model("mamba", task, 6, 2, pe=True, simplified=True, seed=1)
    block.params["out.b"][0] = np.inf
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train(block, task, tr.OptimConfig(epochs=2), small_sizes())
    assert info.value.checkpoint is block
    assert info.value.record.stop_reason == "diverged"


def test_class_mismatch_rejected():
    task = small_task()
    block = tr.init_block("mamba", task.input_vocab, 4, 2, 3, seed=0)
    with pytest.raises(ValueError):
        tr.train(block, task, tr.OptimConfig(epochs=1), small_sizes())


def test_masked_loss_ignores_unmasked_positions():
    task = small_task()
    block = tr.make_model("mamba", task, 6, 2, pe=True, simplified=True, seed=1)
    X, Y, M = stack(make_dataset(task, 4))
    base = float(tr.masked_loss(block, X, Y, M).data)
    Y2 = Y.copy()
    Y2[~M] = 3
    assert float(tr.masked_loss(block, X, Y2, M).data) == base
