"""Adam with cosine annealing, and the training loop for one-layer models.

Rates are trained in log space (``lam = exp(log_lam)``) so they stay
positive; everything else is trained directly. A run is deterministic for a
fixed seed: data come from the task seed, initialization and batch order
from the optimizer seed.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .mixers import DELTA_ONE_BIAS, MambaBlock, block_forward
from .tasks import TaskConfig, evaluate_accuracy, make_dataset, stack

log = logging.getLogger(__name__)

__all__ = [
    "OptimConfig",
    "DatasetSizes",
    "RunRecord",
    "AdamState",
    "TrainingDiverged",
    "adam_step",
    "cosine_lr",
    "init_block",
    "make_model",
    "masked_loss",
    "train",
]


@dataclass(frozen=True)
class OptimConfig:
    lr_init: float = 0.03
    lr_final: float = 1e-6
    epochs: int = 600
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_val_loss: float = 1e-6
    wall_clock_budget: float | None = None
    seed: int = 0
    target_val_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.lr_final <= self.lr_init:
            raise ValueError("need 0 <= lr_final <= lr_init")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "OptimConfig":
        """Defaults sized for a single CPU: 300 epochs, batch 64, 30 min."""
        base = dict(epochs=300, batch_size=64, wall_clock_budget=1800.0)
        return cls(**(base | overrides))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DatasetSizes:
    train: int = 20_000
    val: int = 1_000
    test: int = 10_000

    @classmethod
    def full(cls) -> "DatasetSizes":
        return cls(train=100_000, val=1_000, test=10_000)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    test_accuracy: float | None = None
    epochs_run: int = 0
    stop_reason: str = ""
    n_parameters: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message: str, checkpoint: MambaBlock, record: RunRecord):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.record = record


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Returns new params and a new state."""
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries) at Adam step {t}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def cosine_lr(epoch: int, cfg: OptimConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_init
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_block(kind: str, vocab: int, d: int, N: int, n_classes: int, *, pe: bool = False,
               simplified: bool = False, seed: int = 0, delta_rank="auto", conv_width: int = 2,
               gate_act: str | None = "silu") -> MambaBlock:
    """Randomly initialized block.

    Linear and conv maps are uniform in ±1/sqrt(fan_in), embeddings are
    standard normal, rates are log-uniform in [1e-3, 1e-1] and Δ biases
    start at softplus⁻¹(1). ``delta_rank="auto"`` uses a rank ceil(d/16)
    factorization of the Δ projection for the mamba kinds.
    """
    if delta_rank == "auto":
        delta_rank = math.ceil(d / 16) if kind in ("mamba", "mamba_dt_transpose") else None
    shell = MambaBlock.__new__(MambaBlock)
    shell.__dict__.update(kind=kind, vocab=vocab, d=d, N=N, n_classes=n_classes, pe=pe, simplified=simplified,
                          conv_width=conv_width, conv_act="silu", gate_act=None if simplified else gate_act,
                          delta_rank=delta_rank)
    shapes = MambaBlock.param_shapes(shell)
    rng = np.random.default_rng(seed)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name == "embedding":
            params[name] = rng.standard_normal(shape)
        elif name == "lam":
            params[name] = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=shape))
        elif name == "delta.b":
            params[name] = np.full(shape, DELTA_ONE_BIAS)
        elif name.endswith(".c"):
            params[name] = _uniform(rng, shape, shape[0])
        elif name.endswith(".bias"):
            params[name] = _uniform(rng, shape, conv_width)
        elif name in ("B.static", "C.static"):
            params[name] = _uniform(rng, shape, shape[0])
        elif name.endswith(".w") or name.endswith(".down") or name.endswith(".up"):
            params[name] = _uniform(rng, shape, shape[1])
        elif name.endswith(".b"):
            fan_in = shapes[name[:-2] + ".w"][1] if name[:-2] + ".w" in shapes else d
            params[name] = _uniform(rng, shape, fan_in)
        else:
            raise AssertionError(f"no initializer for {name}")
    prov = {"init": "random", "seed": int(seed)}
    return MambaBlock(kind=kind, vocab=vocab, d=d, N=N, n_classes=n_classes, params=params, pe=pe,
                      simplified=simplified, conv_width=conv_width,
                      gate_act=None if simplified else gate_act, delta_rank=delta_rank, provenance=prov)


def make_model(kind: str, task: TaskConfig, d: int, N: int, **kwargs) -> MambaBlock:
    """init_block sized for a task's vocabulary and classes."""
    return init_block(kind, task.input_vocab, d, N, task.n_classes, **kwargs)


def _to_trainable(block: MambaBlock) -> dict:
    p = {k: v.copy() for k, v in block.params.items() if k != "lam"}
    p["log_lam"] = np.log(np.maximum(block.params["lam"], 1e-300))
    return p


def _to_block(block: MambaBlock, trainable: dict) -> MambaBlock:
    params = {k: v for k, v in trainable.items() if k != "log_lam"}
    params["lam"] = np.exp(trainable["log_lam"])
    return MambaBlock(params=params, provenance=dict(block.provenance), **block.config())


def masked_loss(block: MambaBlock, X, Y, M, weights=None) -> tc.Tensor:
    logits = block_forward(block, X, weights=weights)
    logits = tc.as_tensor(logits)
    bsz, T, C = logits.shape
    return tc.softmax_cross_entropy(tc.reshape(logits, (bsz * T, C)), Y.reshape(-1), M.reshape(-1))


def _loss_and_grads(block: MambaBlock, trainable: dict, X, Y, M):
    leaves = {k: tc.Tensor(v, requires_grad=True) for k, v in trainable.items()}
    weights = {k: t for k, t in leaves.items() if k != "log_lam"}
    weights["lam"] = tc.exp(leaves["log_lam"])
    loss = masked_loss(block, X, Y, M, weights)
    tc.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def _eval_loss(block: MambaBlock, X, Y, M, batch_size: int = 250) -> float:
    total, count = 0.0, 0
    for i in range(0, len(X), batch_size):
        m = M[i:i + batch_size]
        if not m.any():
            continue
        loss = masked_loss(block, X[i:i + batch_size], Y[i:i + batch_size], m)
        n = int(m.sum())
        total += float(loss.data) * n
        count += n
    return total / count


def train(block: MambaBlock, task: TaskConfig | None, optim: OptimConfig | None = None,
          sizes: DatasetSizes | None = None, *, data=None) -> tuple[MambaBlock, RunRecord]:
    """Train ``block`` on ``task`` and return the final block and its record.

    ``data`` may supply prebuilt ``{"train", "val", "test"}`` stacked arrays
    (each an ``(X, Y, M)`` triple); otherwise they are generated from the
    task seed. Stops when validation loss drops below the threshold, when
    validation accuracy reaches ``target_val_accuracy`` (if set), when the
    wall-clock budget runs out, or after the last epoch.
    """
    optim = optim or OptimConfig()
    sizes = sizes or DatasetSizes()
    if task is None and data is None:
        raise ValueError("give a task config or prebuilt data")
    if task is not None and block.n_classes < task.n_classes:
        raise ValueError(f"model has {block.n_classes} classes, task needs {task.n_classes}")
    if task is not None and block.vocab < task.input_vocab:
        raise ValueError(f"model embeds {block.vocab} tokens, task uses {task.input_vocab}")
    if data is None:
        data = {split: stack(make_dataset(task, count, split))
                for split, count in (("train", sizes.train), ("val", sizes.val), ("test", sizes.test))}
    Xtr, Ytr, Mtr = data["train"]
    Xva, Yva, Mva = data["val"]

    record = RunRecord(n_parameters=block.n_parameters(), config={
        "task": None if task is None else task.to_dict(), "optim": optim.to_dict(), "sizes": sizes.to_dict(), "model": block.config()})
    trainable = _to_trainable(block)
    state = AdamState()
    current = block
    start = time.perf_counter()
    stop = "epochs"
    n = len(Xtr)
    for epoch in range(optim.epochs):
        lr = cosine_lr(epoch, optim)
        order = np.random.default_rng([optim.seed, epoch]).permutation(n)
        total, count = 0.0, 0
        out_of_time = False
        for i in range(0, n, optim.batch_size):
            idx = order[i:i + optim.batch_size]
            if not Mtr[idx].any():
                continue
            loss, grads = _loss_and_grads(current, trainable, Xtr[idx], Ytr[idx], Mtr[idx])
            if not math.isfinite(loss):
                record.stop_reason = "diverged"
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", current, record)
            trainable, state = adam_step(trainable, grads, state, lr, (optim.beta1, optim.beta2), optim.eps)
            current = _to_block(block, trainable)
            total += loss * len(idx)
            count += len(idx)
            if optim.wall_clock_budget is not None and time.perf_counter() - start > optim.wall_clock_budget:
                out_of_time = True
                break
        record.train_loss.append(total / max(count, 1))
        vloss = _eval_loss(current, Xva, Yva, Mva)
        vacc = evaluate_accuracy(current, (Xva, Yva, Mva))
        record.val_loss.append(vloss)
        record.val_accuracy.append(vacc)
        record.epochs_run = epoch + 1
        log.info("epoch %d lr %.3g train %.4g val %.4g acc %.4f", epoch, lr, record.train_loss[-1], vloss, vacc)
        if not math.isfinite(vloss):
            record.stop_reason = "diverged"
            raise TrainingDiverged(f"validation loss became {vloss} at epoch {epoch}", current, record)
        if vloss < optim.early_stop_val_loss:
            stop = "val_loss"
            break
        if optim.target_val_accuracy is not None and vacc >= optim.target_val_accuracy:
            stop = "val_accuracy"
            break
        if out_of_time:
            stop = "budget"
            break
    record.stop_reason = stop
    record.test_accuracy = evaluate_accuracy(current, data["test"])
    prov = dict(block.provenance) | {"trained_on": None if task is None else task.to_dict(), "optim_seed": optim.seed,
                                     "epochs_run": record.epochs_run}
    final = replace(current, provenance=prov)
    return final, record
