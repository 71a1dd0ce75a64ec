"""Synthetic sequence tasks with brute-force oracles.

Token id 0 is the blank; task tokens start at 1. Output classes are
``0..vocab_size`` for every task, so a model needs ``vocab_size + 1``
readout rows.

MQAR inputs use ids ``1..kappa`` for keys and ``kappa+1..kappa+vocab_size``
for values; targets are the value index ``1..vocab_size``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

BLANK = 0
SPLITS = {"train": 0, "val": 1, "test": 2}

__all__ = [
    "BLANK",
    "TaskConfig",
    "TaskInstance",
    "gen_keep_nth",
    "gen_mqar",
    "gen_induction_heads",
    "generate",
    "make_dataset",
    "oracle_answer",
    "stack",
    "evaluate_accuracy",
    "predict_logits",
    "dump_ndjson",
    "load_ndjson",
]


@dataclass(frozen=True)
class TaskConfig:
    kind: str
    T: int
    vocab_size: int
    kappa: int | None = None
    n: int | None = None
    p_hard: float = 0.0
    gamma: float = 0.1
    key_mode: str = "permutation"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("keep_nth", "mqar", "induction_heads"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.T < 1 or self.vocab_size < 1:
            raise ValueError("T and vocab_size must be positive")
        if self.kind == "keep_nth" and (self.n is None or not 1 <= self.n <= self.T):
            raise ValueError(f"keep_nth needs 1 <= n <= T (n={self.n}, T={self.T})")
        if self.kind == "mqar":
            if self.kappa is None or self.kappa < 1:
                raise ValueError("mqar needs kappa >= 1")
            if 4 * self.kappa > self.T:
                raise ValueError(f"mqar needs 2*kappa <= T/2 (kappa={self.kappa}, T={self.T})")
            if self.key_mode not in ("permutation", "iid"):
                raise ValueError("key_mode must be 'permutation' or 'iid'")
        if self.kind == "induction_heads":
            if self.T <= 2 * self.vocab_size + 1:
                raise ValueError("induction heads needs T > 2*vocab_size + 1")
            if not 0.0 <= self.p_hard <= 1.0:
                raise ValueError("p_hard must lie in [0, 1]")
            if not 0.0 < self.gamma <= 0.1:
                raise ValueError("gamma must lie in (0, 0.1]")
            if self.p_hard > 0 and int(self.gamma * self.T) < 1:
                raise ValueError("gamma*T must be at least 1 for the hard setting")

    @property
    def input_vocab(self) -> int:
        """Number of embedding rows needed (ids 0..input_vocab-1)."""
        extra = self.kappa if self.kind == "mqar" else 0
        return self.vocab_size + extra + 1

    @property
    def n_classes(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskInstance:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "input": [int(v) for v in self.input],
            "target": [int(v) for v in self.target],
            "mask": [bool(v) for v in self.mask],
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(
            np.asarray(rec["input"], dtype=np.int64),
            np.asarray(rec["target"], dtype=np.int64),
            np.asarray(rec["mask"], dtype=bool),
            dict(rec.get("meta", {})),
        )


def _meta(cfg: TaskConfig, **extra) -> dict:
    return {"generator": cfg.kind, "params": cfg.to_dict(), **extra}


def gen_keep_nth(cfg: TaskConfig) -> TaskInstance:
    rng = np.random.default_rng(cfg.seed)
    x = rng.integers(1, cfg.vocab_size + 1, size=cfg.T)
    target = np.full(cfg.T, x[cfg.n - 1])
    mask = np.arange(1, cfg.T + 1) >= cfg.n
    return TaskInstance(x, target, mask, _meta(cfg))


def _spread_positions(rng, lo: int, hi: int, k: int) -> np.ndarray:
    """k distinct sorted positions in [lo, hi), non-adjacent when room allows."""
    span = hi - lo
    if k > span:
        raise ValueError(f"cannot place {k} queries in a suffix of length {span}")
    if span - (k - 1) >= k:
        slots = np.sort(rng.choice(span - (k - 1), size=k, replace=False))
        return lo + slots + np.arange(k)
    return lo + np.sort(rng.choice(span, size=k, replace=False))


def gen_mqar(cfg: TaskConfig, key_mode: str | None = None) -> TaskInstance:
    key_mode = key_mode or cfg.key_mode
    if key_mode != cfg.key_mode:
        cfg = replace(cfg, key_mode=key_mode)
    rng = np.random.default_rng(cfg.seed)
    kappa, V, T = cfg.kappa, cfg.vocab_size, cfg.T
    if key_mode == "permutation":
        keys = rng.permutation(kappa) + 1
    else:
        keys = rng.integers(1, kappa + 1, size=kappa)
    values = rng.integers(1, V + 1, size=kappa)
    x = np.empty(T, dtype=np.int64)
    x[0:2 * kappa:2] = keys
    x[1:2 * kappa:2] = values + kappa
    table = {}
    for k, v in zip(keys, values):
        table[int(k)] = int(v)
    queried = np.array(sorted(table), dtype=np.int64)
    queried = rng.permutation(queried)
    pos = _spread_positions(rng, 2 * kappa, T, len(queried))
    x[2 * kappa:] = rng.integers(1, V + 1, size=T - 2 * kappa) + kappa
    x[pos] = queried
    target = np.zeros(T, dtype=np.int64)
    mask = np.zeros(T, dtype=bool)
    target[pos] = [table[int(k)] for k in queried]
    mask[pos] = True
    return TaskInstance(x, target, mask, _meta(cfg))


def _latest_occurrence_targets(x: np.ndarray) -> np.ndarray:
    last = {}
    target = np.zeros(len(x), dtype=np.int64)
    for t, tok in enumerate(x):
        tok = int(tok)
        if tok in last:
            target[t] = x[last[tok] + 1]
        last[tok] = t
    return target


def gen_induction_heads(cfg: TaskConfig) -> TaskInstance:
    rng = np.random.default_rng(cfg.seed)
    V, T = cfg.vocab_size, cfg.T
    hard = bool(rng.random() < cfg.p_hard)
    extra = {"hard": hard}
    if hard:
        special = int(rng.integers(1, V + 1))
        others = np.array([v for v in range(1, V + 1) if v != special])
        if len(others) == 0:
            raise ValueError("hard setting needs vocab_size >= 2")
        x = rng.choice(others, size=T)
        r = int(rng.integers(1, int(cfg.gamma * T) + 1))
        x[r - 1] = special
        x[T - r - 1] = special
        extra.update(special=special, r=r)
    else:
        x = rng.integers(1, V + 1, size=T)
    target = _latest_occurrence_targets(x)
    mask = np.arange(1, T + 1) >= 2
    return TaskInstance(np.asarray(x, dtype=np.int64), target, mask, _meta(cfg, **extra))


_GENERATORS = {"keep_nth": gen_keep_nth, "mqar": gen_mqar, "induction_heads": gen_induction_heads}


def generate(cfg: TaskConfig) -> TaskInstance:
    return _GENERATORS[cfg.kind](cfg)


def instance_seed(seed: int, split: str, index: int) -> int:
    """Seed for the index-th instance of a split; splits never collide."""
    ss = np.random.SeedSequence([int(seed), SPLITS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_dataset(cfg: TaskConfig, count: int, split: str = "test") -> list:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}")
    return [generate(replace(cfg, seed=instance_seed(cfg.seed, split, i))) for i in range(count)]


def oracle_answer(instance: TaskInstance) -> np.ndarray:
    """Recompute targets from the input sequence alone."""
    meta = instance.meta
    gen = meta.get("generator")
    x = np.asarray(instance.input, dtype=np.int64)
    params = meta.get("params", {})
    if gen == "keep_nth":
        return np.full(len(x), x[params["n"] - 1])
    if gen == "mqar":
        kappa = params["kappa"]
        table = {}
        for t in range(0, 2 * kappa, 2):
            table[int(x[t])] = int(x[t + 1]) - kappa
        out = np.zeros(len(x), dtype=np.int64)
        for t in range(2 * kappa, len(x)):
            if 1 <= x[t] <= kappa:
                out[t] = table[int(x[t])]
        return out
    if gen == "induction_heads":
        return _latest_occurrence_targets(x)
    raise ValueError(f"unknown generator {gen!r}")


def stack(instances: Sequence[TaskInstance]):
    """Stack equal-length instances into (inputs, targets, masks) arrays."""
    if not instances:
        raise ValueError("no instances")
    lengths = {len(i.input) for i in instances}
    if len(lengths) != 1:
        raise ValueError("instances have different lengths")
    X = np.stack([i.input for i in instances]).astype(np.int64)
    Y = np.stack([i.target for i in instances]).astype(np.int64)
    M = np.stack([i.mask for i in instances]).astype(bool)
    return X, Y, M


STATE_BUDGET = 1 << 25


def predict_logits(model, X: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Logits for a stacked batch from a MambaBlock or any callable."""
    from .mixers import MambaBlock, block_forward

    fn = (lambda xb: block_forward(model, xb)) if isinstance(model, MambaBlock) else model
    if isinstance(model, MambaBlock) and X.ndim == 2:
        # keep the (batch, T, d, N) state tensor near 32M entries
        per_seq = X.shape[1] * model.d * model.N
        batch_size = max(1, min(batch_size, STATE_BUDGET // max(per_seq, 1)))
    parts = [np.asarray(fn(X[i:i + batch_size])) for i in range(0, len(X), batch_size)]
    return np.concatenate(parts, axis=0)


def evaluate_accuracy(model, instances, n_classes: int | None = None, batch_size: int = 250,
                      return_details: bool = False):
    """Masked argmax accuracy; ties resolve to the lowest class index."""
    X, Y, M = stack(list(instances)) if not isinstance(instances, tuple) else instances
    if not M.any():
        raise ValueError("no evaluated positions")
    logits = predict_logits(model, X, batch_size)
    need = int(Y[M].max()) + 1 if n_classes is None else n_classes
    if logits.shape[-1] < need:
        raise ValueError(f"model has {logits.shape[-1]} classes, task needs {need}")
    pred = np.argmax(logits, axis=-1)
    hits = (pred == Y) & M
    acc = float(hits.sum() / M.sum())
    if return_details:
        failed = np.nonzero((~hits & M).any(axis=1))[0]
        return acc, {"pred": pred, "failed_rows": failed}
    return acc


def dump_ndjson(instances: Iterable[TaskInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def load_ndjson(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_record(json.loads(line)) for line in fh if line.strip()]
