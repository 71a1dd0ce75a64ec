"""Selective state-space mixers: S4D, Mamba (S6), Mamba-2 and Mamba-Δᵀ.

All four share the diagonal recurrence

    h_t = a_t ⊙ h_{t-1} + u_t,    y_t = h_t C_t,    h_0 = 0,

with a d×N state. They differ in how the decay ``a_t = exp(-λ Δ_t)`` and
the input term ``u_t`` are formed:

==================  ==================  =================  ====================
kind                Δ_t shape           λ shape            u_t
==================  ==================  =================  ====================
s4d                 (Δ ≡ 1)             (d, N) or (N,)     x̂_t ⊗ B
mamba               (d,)                (d, N)             (Δ_t ⊙ x̂_t) ⊗ B_t
mamba2              scalar              scalar             Δ_t x̂_t ⊗ B_t
mamba_dt_transpose  (N,)                (d, N)             x̂_t ⊗ B_t
==================  ==================  =================  ====================

A :class:`MambaBlock` wraps one mixer with an embedding, short causal
convolutions, an optional multiplicative gate and a linear readout. The
same forward code serves inference on numpy arrays and training through
:mod:`selective_ssm.tensor_core`.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _scan_kernels as _kernels
from . import tensor_core as tc

KINDS = ("s4d", "mamba", "mamba2", "mamba_dt_transpose")
ACTIVATIONS = ("relu", "silu", "identity")
FORMAT_NAME = "selective_ssm.block"
FORMAT_VERSION = 1

# softplus^{-1}(1): bias giving Δ = 1 when the Δ-projection weights are zero.
DELTA_ONE_BIAS = math.log(math.e - 1.0)

__all__ = [
    "KINDS",
    "DELTA_ONE_BIAS",
    "zoh_discretize",
    "euler_discretize_B",
    "SsmParams",
    "ConvKernel",
    "short_conv",
    "gate",
    "scan_sequential",
    "scan_parallel",
    "selective_scan",
    "MambaBlock",
    "block_forward",
    "block_to_json",
    "block_from_json",
]


# ---------------------------------------------------------------------------
# discretization


def zoh_discretize(lam, delta, b):
    """Zero-order hold for a diagonal rate ``lam`` (decay ``exp(-lam*delta)``).

    Returns ``(lambda_bar, b_bar)`` with
    ``b_bar = (1 - exp(-lam*delta)) / (lam*delta) * b*delta`` and the
    ``lam*delta -> 0`` limit ``b*delta``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("delta must be nonnegative")
    z = lam * delta
    lam_bar = np.exp(-z)
    safe = np.where(z > 0, z, 1.0)
    phi = np.where(z > 0, -np.expm1(-safe) / safe, 1.0)
    return lam_bar, phi * b * delta


def euler_discretize_B(delta, b):
    """Forward-Euler input coefficient ``b * delta``."""
    return np.asarray(b, dtype=np.float64) * np.asarray(delta, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class SsmParams:
    """Continuous-time parameters of one mixer layer.

    ``lam`` holds nonnegative rates. Input-dependent kinds use ``b_proj``,
    ``c_proj`` and ``delta_proj`` as ``(weight, bias)`` pairs; S4D uses
    ``static_B`` and ``static_C`` instead.
    """

    kind: str
    lam: np.ndarray
    b_proj: tuple | None = None
    c_proj: tuple | None = None
    delta_proj: tuple | None = None
    static_B: np.ndarray | None = None
    static_C: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixer kind {self.kind!r}")
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if np.any(self.lam < 0) or not np.all(np.isfinite(self.lam)):
            raise ValueError("rates lambda must be finite and nonnegative")
        static = self.static_B is not None or self.static_C is not None
        dynamic = self.b_proj is not None or self.c_proj is not None
        if static and dynamic:
            raise ValueError("use either static B/C or input projections, not both")
        if self.kind == "s4d" and dynamic:
            raise ValueError("s4d takes static B and C")
        if self.kind != "s4d" and static:
            raise ValueError(f"{self.kind} takes input-dependent B and C")


@dataclass
class ConvKernel:
    """Causal depthwise kernel; ``c[w]`` multiplies ``x_{t-width+1+w}``."""

    c: np.ndarray
    bias: np.ndarray
    nonlinearity: str = "relu"

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.c.shape[1] != self.bias.shape[0]:
            raise ValueError("kernel and bias channel counts differ")
        if self.nonlinearity not in ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def width(self) -> int:
        return self.c.shape[0]


def _act(name: str, x):
    if name == "identity":
        return x
    return tc.elementwise(name, x)


def _conv(c, bias, x, act: str):
    """Causal conv on Tensors; x is (..., T, C) and c is (width, C)."""
    width = c.shape[0]
    T = x.shape[-2]
    if width > 1:
        pad = tc.Tensor(np.zeros(x.shape[:-2] + (width - 1, x.shape[-1])))
        xp = tc.concat([pad, x], axis=-2)
    else:
        xp = x
    acc = None
    for w in range(width):
        term = tc.getitem(xp, (Ellipsis, slice(w, w + T), slice(None))) * tc.getitem(c, w)
        acc = term if acc is None else acc + term
    return _act(act, acc - bias)


def short_conv(kernel: ConvKernel, x) -> np.ndarray:
    """x̂_t = σ(Σ_w c_w ⊙ x_{t-width+1+w} - bias) with zero left padding."""
    x = np.asarray(x, dtype=np.float64)
    out = _conv(tc.Tensor(kernel.c), tc.Tensor(kernel.bias), tc.Tensor(x), kernel.nonlinearity)
    return out.data


def gate(w, b, x, y, nonlinearity: str = "silu") -> np.ndarray:
    """ỹ = σ(W x + b) ⊙ y."""
    g = _act(nonlinearity, tc.Tensor(np.asarray(x, dtype=np.float64) @ np.asarray(w).T + b))
    return g.data * np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# scans


def _layout(kind: str, x, delta, Bm, Cm, lam):
    """Broadcast views for a batch: returns (D4, S4, lam4, x4, B4, C3).

    D4 multiplies λ inside the decay, S4 scales the input; both broadcast to
    (batch, T, d, N).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown mixer kind {kind!r}")
    bsz, T, d = x.shape
    N = Bm.shape[-1]
    if Bm.shape != (bsz, T, N) or Cm.shape != (bsz, T, N):
        raise ValueError(f"B and C must be (batch, T, N); got {Bm.shape}, {Cm.shape}")
    if kind == "mamba":
        if delta.shape != (bsz, T, d):
            raise ValueError(f"mamba delta must be (batch, T, d); got {delta.shape}")
        D4 = delta[..., None]
        S4 = D4
    elif kind == "mamba2":
        if delta.shape != (bsz, T):
            raise ValueError(f"mamba2 delta must be (batch, T); got {delta.shape}")
        D4 = delta[..., None, None]
        S4 = D4
    elif kind == "mamba_dt_transpose":
        if delta.shape != (bsz, T, N):
            raise ValueError(f"mamba_dt_transpose delta must be (batch, T, N); got {delta.shape}")
        D4 = delta[:, :, None, :]
        S4 = np.ones((1, 1, 1, 1))
    else:
        D4 = np.ones((1, 1, 1, 1))
        S4 = D4
    lam = np.asarray(lam, dtype=np.float64)
    if kind == "mamba2":
        if lam.size != 1:
            raise ValueError("mamba2 uses one scalar rate")
        lam4 = lam.reshape(1, 1)
    else:
        if lam.shape not in ((d, N), (N,)):
            raise ValueError(f"rates must be (d, N) or (N,); got {lam.shape}")
        lam4 = np.broadcast_to(lam, (d, N))
    if np.any(lam4 < 0) or np.any(D4 < 0):
        raise ValueError("decay rates and step sizes must be nonnegative")
    return D4, S4, lam4, x[..., None], Bm[:, :, None, :], Cm


def _batched(kind, x, delta, Bm, Cm):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
        Bm = np.asarray(Bm, dtype=np.float64)[None]
        Cm = np.asarray(Cm, dtype=np.float64)[None]
        if delta is not None:
            delta = np.asarray(delta, dtype=np.float64)[None]
    bsz, T, _ = x.shape
    if delta is None:
        if kind != "s4d":
            raise ValueError(f"{kind} needs per-step deltas")
        delta = np.ones((bsz, T))
    return single, x, np.asarray(delta, dtype=np.float64), np.asarray(Bm, dtype=np.float64), np.asarray(Cm, dtype=np.float64)


def _input_scale(kind, S4, D4, lam4, b_discretization):
    if b_discretization == "euler" or kind == "mamba_dt_transpose":
        return S4
    if b_discretization != "zoh":
        raise ValueError("b_discretization must be 'euler' or 'zoh'")
    z = lam4 * D4
    safe = np.where(z > 0, z, 1.0)
    return S4 * np.where(z > 0, -np.expm1(-safe) / safe, 1.0)


def _check_decay(a):
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise FloatingPointError("decay factor left [0, 1]")


def _scan_core(kind, x, delta, Bm, Cm, lam, *, keep_states=False, b_discretization="euler"):
    D4, S4, lam4, x4, B4, C3 = _layout(kind, x, delta, Bm, Cm, lam)
    S4 = _input_scale(kind, S4, D4, lam4, b_discretization)
    bsz, T, d = x.shape
    N = Bm.shape[-1]
    h = np.zeros((bsz, d, N))
    if keep_states:
        A = np.broadcast_to(np.exp(-lam4 * D4), (bsz, T, d, N))
        _check_decay(A)
        U = S4 * x4 * B4
        states = np.empty((bsz, T, d, N))
        for t in range(T):
            h = A[:, t] * h + U[:, t]
            states[:, t] = h
        y = np.einsum("btdn,btn->btd", states, C3)
        return y, h, states
    y = np.empty((bsz, T, d))
    for t in range(T):
        a = np.exp(-lam4 * _at(D4, t))
        _check_decay(a)
        h = a * h + (_at(S4, t) * x4[:, t]) * B4[:, t]
        y[:, t] = np.einsum("bdn,bn->bd", h, C3[:, t])
    return y, h, None


def scan_sequential(kind, params=None, inputs=None, deltas=None, Bs=None, Cs=None, *, lam=None, b_discretization="euler"):
    """Run the recurrence step by step.

    ``inputs`` is (T, d) or (batch, T, d); ``deltas`` follows the kind's Δ
    shape (None for s4d); ``Bs``/``Cs`` are (.., T, N). Rates come from
    ``params.lam`` or the ``lam`` keyword. Returns ``(y, h_T)``.
    """
    lam = params.lam if lam is None else lam
    single, x, delta, Bm, Cm = _batched(kind, inputs, deltas, Bs, Cs)
    y, h, _ = _scan_core(kind, x, delta, Bm, Cm, lam, b_discretization=b_discretization)
    return (y[0], h[0]) if single else (y, h)


def scan_parallel(kind, params=None, inputs=None, deltas=None, Bs=None, Cs=None, *, lam=None, b_discretization="euler"):
    """Same result as :func:`scan_sequential` via a doubling prefix scan.

    Pairs ``(log a_t, u_t)`` are combined with
    ``(a1, u1) ∘ (a2, u2) = (a1 a2, a2 u1 + u2)``; decay products are kept as
    sums of logs. The combination tree depends only on T.
    """
    lam = params.lam if lam is None else lam
    single, x, delta, Bm, Cm = _batched(kind, inputs, deltas, Bs, Cs)
    D4, S4, lam4, x4, B4, C3 = _layout(kind, x, delta, Bm, Cm, lam)
    S4 = _input_scale(kind, S4, D4, lam4, b_discretization)
    bsz, T, d = x.shape
    N = Bm.shape[-1]
    la = np.broadcast_to(-lam4 * D4, (bsz, T, d, N)).copy()
    _check_decay(np.exp(la))
    u = np.broadcast_to(S4 * x4 * B4, (bsz, T, d, N)).copy()
    off = 1
    while off < T:
        u_new = u.copy()
        u_new[:, off:] = np.exp(la[:, off:]) * u[:, :-off] + u[:, off:]
        la_new = la.copy()
        la_new[:, off:] = la[:, :-off] + la[:, off:]
        u, la = u_new, la_new
        off *= 2
    y = np.einsum("btdn,btn->btd", u, C3)
    h = u[:, -1] if T else np.zeros((bsz, d, N))
    return (y[0], h[0]) if single else (y, h)


def _scan_scalar_dual(x, delta, Bm, Cm, lam):
    """Mamba-2 outputs through the T×T kernel form of a scalar-decay scan."""
    lam = float(np.asarray(lam).reshape(-1)[0])
    if lam < 0 or np.any(delta < 0):
        raise ValueError("decay rates and step sizes must be nonnegative")
    L = np.cumsum(-lam * delta, axis=1)
    T = x.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    diff = L[:, :, None] - L[:, None, :]
    decay = np.where(causal, np.exp(np.where(causal, diff, 0.0)), 0.0)
    G = np.einsum("btn,bsn->bts", Cm, Bm) * decay * delta[:, None, :]
    return np.einsum("bts,bsd->btd", G, x)


def selective_scan(kind: str, x, delta, Bm, Cm, lam, *, backend: str = "auto") -> tc.Tensor:
    """Differentiable batched scan; every argument may be a Tensor.

    x: (batch, T, d); delta: kind-shaped or None for s4d; Bm, Cm: anything
    broadcastable to (batch, T, N); lam: rate array. Returns y (batch, T, d).
    ``backend`` picks the gradient path: "numpy", "compiled" (numba) or
    "auto" (compiled when available).
    """
    if backend not in ("auto", "numpy", "compiled"):
        raise ValueError("backend must be 'auto', 'numpy' or 'compiled'")
    if backend == "compiled" and not _kernels.AVAILABLE:
        raise RuntimeError("compiled backend needs numba")
    compiled = backend == "compiled" or (backend == "auto" and _kernels.AVAILABLE)
    x = tc.as_tensor(x)
    bsz, T, d = x.shape
    Bm, Cm, lam = tc.as_tensor(Bm), tc.as_tensor(Cm), tc.as_tensor(lam)
    N = Bm.shape[-1]
    delta_t = tc.as_tensor(np.ones((bsz, T)) if delta is None else delta)
    Bd = np.broadcast_to(Bm.data, (bsz, T, N))
    Cd = np.broadcast_to(Cm.data, (bsz, T, N))
    inputs = (x, delta_t, Bm, Cm, lam)
    needs_grad = any(t.requires_grad for t in inputs)

    if kind == "mamba2" and not needs_grad and d * N > 4 * T * (d + N):
        return tc.Tensor(_scan_scalar_dual(x.data, delta_t.data, Bd, Cd, lam.data))
    if not needs_grad:
        y, _, _ = _scan_core(kind, x.data, delta_t.data, Bd, Cd, lam.data)
        return tc.Tensor(y)

    D4, S4, lam4, x4, B4, C3 = _layout(kind, x.data, delta_t.data, Bd, Cd, lam.data)
    full = (bsz, T, d, N)
    if compiled:
        Dv, lamv = np.broadcast_to(D4, full), np.ascontiguousarray(np.broadcast_to(lam4, (d, N)))
        Sv, Bv = np.broadcast_to(S4, full), np.ascontiguousarray(Bd)
        Cv = np.ascontiguousarray(Cd)
        Av = np.ascontiguousarray(np.broadcast_to(np.exp(-lam4 * D4), full))
        _check_decay(Av)
        y, states = _kernels.forward(Av, np.ascontiguousarray(np.broadcast_to(S4 * x4 * B4, full)), Cv)
    else:
        y, _, states = _scan_core(kind, x.data, delta_t.data, Bd, Cd, lam.data, keep_states=True)

    scaled = kind in ("mamba", "mamba2")
    delta_shape = (bsz, T) + D4.shape[2:]

    def delta_cotangents(gy):
        if compiled:
            gx, gB, gC, gD4, glam = _kernels.backward(Av, Dv, lamv, Sv, x.data, Bv, Cv, states, gy, delta_shape, scaled)
            return gx, gB, gC, gD4, _sum_to(glam, lam4.shape)
        A = np.broadcast_to(np.exp(-lam4 * D4), full)
        G = gy[..., None] * C3[:, :, None, :]
        for t in range(T - 2, -1, -1):
            G[:, t] += A[:, t + 1] * G[:, t + 1]
        gC = np.einsum("btdn,btd->btn", states, gy)
        GS = G * S4
        gx = np.einsum("btdn,btn->btd", GS, B4[:, :, 0, :])
        gB = np.einsum("btdn,btd->btn", GS, x4[..., 0])
        gla = np.zeros_like(G)
        gla[:, 1:] = G[:, 1:] * states[:, :-1] * A[:, 1:]
        glam = -_sum_to((gla * D4).sum(axis=(0, 1)), lam4.shape)
        gD4 = _sum_to(-gla * lam4, delta_shape)
        if scaled:
            gD4 = gD4 + _sum_to(G * x4 * B4, delta_shape)
        return gx, gB, gC, gD4, glam

    def vjp(gy):
        gx, gB, gC, gD4, glam = delta_cotangents(gy)
        if kind == "mamba":
            gdelta = gD4[..., 0]
        elif kind == "mamba2":
            gdelta = gD4[..., 0, 0]
        elif kind == "mamba_dt_transpose":
            gdelta = gD4[:, :, 0, :]
        else:
            gdelta = None
        return gx, gdelta, gB, gC, glam.reshape(lam.data.shape) if kind == "mamba2" else glam

    return tc.custom_op(inputs, y, vjp, f"scan_{kind}")


def _at(A, t):
    return A[:, t] if A.shape[1] > 1 else A[:, 0]


def _sum_to(g, shape):
    """Sum ``g`` over the axes where ``shape`` has size 1."""
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------------------
# block


@dataclass
class MambaBlock:
    """One-layer model: embedding → mixer block → linear readout.

    Weights live in ``params`` under fixed names (see :meth:`param_shapes`).
    ``vocab`` counts embedding rows (token ids ``0..vocab-1``) and
    ``n_classes`` the readout width.
    """

    kind: str
    vocab: int
    d: int
    N: int
    n_classes: int
    params: dict = field(default_factory=dict)
    pe: bool = False
    simplified: bool = False
    conv_width: int = 2
    conv_act: str = "silu"
    gate_act: str | None = None
    delta_rank: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixer kind {self.kind!r}")
        if self.conv_act not in ACTIVATIONS:
            raise ValueError(f"unknown conv nonlinearity {self.conv_act!r}")
        if self.gate_act is not None and self.gate_act not in ACTIVATIONS:
            raise ValueError(f"unknown gate nonlinearity {self.gate_act!r}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        missing = set(self.param_shapes()) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if np.any(self.params["lam"] < 0):
            raise ValueError("rates lambda must be nonnegative")

    @property
    def has_conv(self) -> bool:
        return not self.simplified and self.conv_width > 0

    @property
    def has_gate(self) -> bool:
        return not self.simplified and self.gate_act is not None

    def param_shapes(self) -> dict:
        d, N, kind = self.d, self.N, self.kind
        shapes = {"embedding": (self.vocab, d - 1 if self.pe else d)}
        if kind == "mamba2":
            shapes.update({"in_u.w": (d, d), "in_B.w": (N, d), "in_C.w": (N, d)})
            if self.has_conv:
                for name, ch in (("conv_u", d), ("conv_B", N), ("conv_C", N)):
                    shapes[f"{name}.c"] = (self.conv_width, ch)
                    shapes[f"{name}.bias"] = (ch,)
            shapes["lam"] = (1,)
            shapes["delta.w"] = (1, d)
            shapes["delta.b"] = (1,)
        else:
            if self.has_conv:
                shapes["conv_u.c"] = (self.conv_width, d)
                shapes["conv_u.bias"] = (d,)
            shapes["lam"] = (d, N)
            if kind == "s4d":
                shapes["B.static"] = (N,)
                shapes["C.static"] = (N,)
            else:
                out = d if kind == "mamba" else N
                if self.delta_rank is None:
                    shapes["delta.w"] = (out, d)
                else:
                    shapes["delta.down"] = (self.delta_rank, d)
                    shapes["delta.up"] = (out, self.delta_rank)
                shapes["delta.b"] = (out,)
                shapes.update({"B.w": (N, d), "B.b": (N,), "C.w": (N, d), "C.b": (N,)})
        if self.has_gate:
            shapes["gate.w"] = (d, d)
            shapes["gate.b"] = (d,)
        shapes["out.w"] = (self.n_classes, d)
        shapes["out.b"] = (self.n_classes,)
        return shapes

    def n_parameters(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.param_shapes().values()))

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "vocab": self.vocab,
            "d": self.d,
            "N": self.N,
            "n_classes": self.n_classes,
            "pe": self.pe,
            "simplified": self.simplified,
            "conv_width": self.conv_width,
            "conv_act": self.conv_act,
            "gate_act": self.gate_act,
            "delta_rank": self.delta_rank,
        }

    def ssm_params(self) -> SsmParams:
        p = self.params
        if self.kind == "s4d":
            return SsmParams("s4d", p["lam"], static_B=p["B.static"], static_C=p["C.static"])
        if self.kind == "mamba2":
            return SsmParams("mamba2", p["lam"], b_proj=(p["in_B.w"], None), c_proj=(p["in_C.w"], None),
                             delta_proj=(p["delta.w"], p["delta.b"]))
        if self.delta_rank is None:
            dw = p["delta.w"]
        else:
            dw = p["delta.up"] @ p["delta.down"]
        return SsmParams(self.kind, p["lam"], b_proj=(p["B.w"], p["B.b"]), c_proj=(p["C.w"], p["C.b"]),
                         delta_proj=(dw, p["delta.b"]))

    def conv_kernel(self, name: str = "conv_u") -> ConvKernel | None:
        if not self.has_conv:
            return None
        return ConvKernel(self.params[f"{name}.c"], self.params[f"{name}.bias"], self.conv_act)

    def without_gate(self) -> "MambaBlock":
        """Copy of this block with the gate removed (ỹ = y)."""
        params = {k: v for k, v in self.params.items() if not k.startswith("gate.")}
        cfg = self.config() | {"gate_act": None}
        prov = dict(self.provenance) | {"ablation": "gate removed"}
        return MambaBlock(params=params, provenance=prov, **cfg)


def _linear(x, w, b=None):
    y = tc.matmul(x, tc.transpose(w))
    return y if b is None else y + b


def block_forward(block: MambaBlock, tokens, pe: bool | None = None, *, weights: Mapping | None = None,
                  trace: dict | None = None):
    """Logits (…, T, n_classes) for token ids of shape (T,) or (batch, T).

    ``weights`` optionally overrides named parameters with Tensors (used for
    training). ``trace``, when given, receives the decay factors.
    Returns a numpy array unless any weight requires a gradient, in which
    case the result is a Tensor.
    """
    pe = block.pe if pe is None else pe
    if pe != block.pe:
        raise ValueError("positional-encoding flag does not match the block")
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        if not np.all(tokens == np.round(tokens)):
            raise ValueError("token ids must be integers")
        tokens = tokens.astype(np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ValueError("tokens must be (T,) or (batch, T)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= block.vocab):
        bad = tokens[(tokens < 0) | (tokens >= block.vocab)][0]
        raise ValueError(f"unknown token id {int(bad)} (vocab size {block.vocab})")
    weights = dict(weights or {})

    def P(name):
        w = weights.get(name)
        return w if w is not None else tc.Tensor(block.params[name])

    bsz, T = tokens.shape
    d, N, kind = block.d, block.N, block.kind
    x = tc.take_rows(P("embedding"), tokens)
    if pe:
        pos = np.broadcast_to((np.arange(1, T + 1) / T)[None, :, None], (bsz, T, 1))
        x = tc.concat([x, tc.Tensor(pos)], axis=-1)

    if kind == "mamba2":
        u = _linear(x, P("in_u.w"))
        bp = _linear(x, P("in_B.w"))
        cp = _linear(x, P("in_C.w"))
        if block.has_conv:
            act = block.conv_act
            xh = _conv(P("conv_u.c"), P("conv_u.bias"), u, act)
            Bm = _conv(P("conv_B.c"), P("conv_B.bias"), bp, act)
            Cm = _conv(P("conv_C.c"), P("conv_C.bias"), cp, act)
        else:
            xh, Bm, Cm = u, bp, cp
        delta = tc.reshape(tc.softplus(_linear(x, P("delta.w"), P("delta.b"))), (bsz, T))
    else:
        xh = _conv(P("conv_u.c"), P("conv_u.bias"), x, block.conv_act) if block.has_conv else x
        if kind == "s4d":
            delta = None
            Bm, Cm = P("B.static"), P("C.static")
        else:
            if block.delta_rank is None:
                pre = _linear(xh, P("delta.w"), P("delta.b"))
            else:
                pre = _linear(_linear(xh, P("delta.down")), P("delta.up"), P("delta.b"))
            delta = tc.softplus(pre)
            Bm = _linear(xh, P("B.w"), P("B.b"))
            Cm = _linear(xh, P("C.w"), P("C.b"))

    lam = P("lam")
    y = selective_scan(kind, xh, delta, Bm, Cm, lam)

    if trace is not None:
        dd = np.ones((bsz, T)) if delta is None else delta.data
        if kind == "mamba2":
            trace["decay"] = np.exp(-lam.data.reshape(()) * dd)
        elif kind == "mamba":
            trace["decay"] = np.exp(-lam.data[None, None] * dd[..., None])
        elif kind == "mamba_dt_transpose":
            trace["decay"] = np.exp(-lam.data[None, None] * dd[:, :, None, :])
        else:
            trace["decay"] = np.broadcast_to(np.exp(-np.broadcast_to(lam.data, (d, N))), (bsz, T, d, N))
        trace["delta"] = dd

    if block.has_gate:
        g = _act(block.gate_act, _linear(x, P("gate.w"), P("gate.b")))
        y = g * y

    logits = _linear(y, P("out.w"), P("out.b"))
    if logits.requires_grad:
        return logits[0] if single else logits
    return logits.data[0] if single else logits.data


# ---------------------------------------------------------------------------
# serialization


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "float64", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(rec: dict) -> np.ndarray:
    if rec.get("dtype") != "float64":
        raise ValueError("only float64 arrays are supported")
    raw = base64.b64decode(rec["data"].encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(rec["shape"])


def block_to_json(block: MambaBlock) -> str:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": block.config(),
        "params": {k: _encode(v) for k, v in sorted(block.params.items())},
        "provenance": block.provenance,
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def block_from_json(text: str) -> MambaBlock:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ValueError("not a selective_ssm model file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    try:
        params = {k: _decode(v) for k, v in doc["params"].items()}
        return MambaBlock(params=params, provenance=doc.get("provenance", {}), **doc["config"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model file: {exc}") from exc
