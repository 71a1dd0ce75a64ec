"""scikit-learn style wrapper around one trainable mixer block.

Inputs are token sequences: ``X`` is (n_sequences, T) of integer ids, ``y``
the per-position class targets of the same shape and ``sample_mask`` marks
which positions count in the loss and in :meth:`score`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .mixers import MambaBlock, block_forward
from .training import DatasetSizes, OptimConfig, init_block, train

__all__ = ["SelectiveSSMClassifier", "check_tokens", "check_targets", "check_mask"]


def check_tokens(X, vocab: int | None = None) -> np.ndarray:
    """Validate a (n, T) array of nonnegative integer token ids."""
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if X.dtype.kind == "f":
        if not np.all(X == np.round(X)):
            raise ValueError("token ids must be integers")
    elif X.dtype.kind not in "iu":
        raise ValueError(f"token ids must be integers, got dtype {X.dtype}")
    X = X.astype(np.int64)
    if X.size and X.min() < 0:
        raise ValueError("token ids must be nonnegative")
    if vocab is not None and X.size and X.max() >= vocab:
        raise ValueError(f"token id {int(X.max())} is outside the vocabulary of size {vocab}")
    return X


def check_targets(y, shape: tuple) -> np.ndarray:
    y = check_tokens(y)
    if y.shape != tuple(shape):
        raise ValueError(f"targets have shape {y.shape}, inputs have {tuple(shape)}")
    return y


def check_mask(mask, shape: tuple) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask has shape {mask.shape}, inputs have {tuple(shape)}")
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be boolean")
        mask = mask.astype(bool)
    return mask


class SelectiveSSMClassifier(ClassifierMixin, BaseEstimator):
    """Per-position token classifier built on one selective SSM layer.

    Parameters mirror :func:`selective_ssm.training.init_block` and
    :class:`selective_ssm.training.OptimConfig`. ``vocab`` and ``n_classes``
    default to one more than the largest id seen in ``fit``.
    """

    def __init__(self, kind: str = "mamba", d: int = 32, N: int = 8, pe: bool = True, simplified: bool = True,
                 vocab: int | None = None, n_classes: int | None = None, lr_init: float = 0.03,
                 lr_final: float = 1e-6, epochs: int = 300, batch_size: int = 64, val_fraction: float = 0.05,
                 target_val_accuracy: float | None = None, wall_clock_budget: float | None = None,
                 seed: int = 0):
        self.kind = kind
        self.d = d
        self.N = N
        self.pe = pe
        self.simplified = simplified
        self.vocab = vocab
        self.n_classes = n_classes
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.target_val_accuracy = target_val_accuracy
        self.wall_clock_budget = wall_clock_budget
        self.seed = seed

    def fit(self, X, y, sample_mask=None):
        X = check_tokens(X, self.vocab)
        y = check_targets(y, X.shape)
        mask = check_mask(sample_mask, X.shape)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        vocab = self.vocab or int(X.max()) + 1
        n_classes = self.n_classes or int(y[mask].max()) + 1
        if y[mask].max() >= n_classes:
            raise ValueError(f"target {int(y[mask].max())} exceeds n_classes={n_classes}")
        n_val = max(1, int(round(len(X) * self.val_fraction)))
        if n_val >= len(X):
            raise ValueError("need more sequences than the validation split")
        order = np.random.default_rng(self.seed).permutation(len(X))
        va, tr = order[:n_val], order[n_val:]
        data = {"train": (X[tr], y[tr], mask[tr]), "val": (X[va], y[va], mask[va]),
                "test": (X[va], y[va], mask[va])}
        block = init_block(self.kind, vocab, self.d, self.N, n_classes, pe=self.pe,
                           simplified=self.simplified, seed=self.seed)
        optim = OptimConfig(lr_init=self.lr_init, lr_final=self.lr_final, epochs=self.epochs,
                            batch_size=self.batch_size, wall_clock_budget=self.wall_clock_budget,
                            seed=self.seed, target_val_accuracy=self.target_val_accuracy)
        sizes = DatasetSizes(train=len(tr), val=n_val, test=n_val)
        self.block_, self.record_ = train(block, None, optim, sizes, data=data)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_block(cls, block: MambaBlock) -> "SelectiveSSMClassifier":
        """Wrap an already built block (e.g. a closed-form construction)."""
        est = cls(kind=block.kind, d=block.d, N=block.N, pe=block.pe, simplified=block.simplified,
                  vocab=block.vocab, n_classes=block.n_classes)
        est.block_ = block
        est.record_ = None
        est.classes_ = np.arange(block.n_classes)
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "block_")
        X = check_tokens(X, self.block_.vocab)
        return np.asarray(block_forward(self.block_, X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def score(self, X, y, sample_mask=None) -> float:
        """Accuracy over the masked positions."""
        X = check_tokens(X)
        y = check_targets(y, X.shape)
        mask = check_mask(sample_mask, X.shape)
        if not mask.any():
            raise ValueError("no positions selected by the mask")
        return float(np.mean(self.predict(X)[mask] == y[mask]))
