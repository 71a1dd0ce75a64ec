"""Closed-form weights that solve the synthetic tasks exactly.

Every builder returns a :class:`~selective_ssm.mixers.MambaBlock` that runs
through the ordinary forward pass. Limits such as ``w -> ±inf`` are
replaced by large finite weights whose exponentials saturate exactly in
float64 (``exp(-1e4) == 0``).

The first part of the module evaluates single-channel "basis functions"

    g(s) = B · exp(-λ ∫_s^{t_end} softplus(w r + b) dr)

and combines three of them into a Haar wavelet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mixers import DELTA_ONE_BIAS, MambaBlock, SsmParams, scan_sequential
from .tensor_core import np_softplus

__all__ = [
    "BasisSpec",
    "WaveletIndex",
    "JlProjection",
    "eval_mamba_basis",
    "haar_psi",
    "build_wavelet_triplet",
    "eval_wavelet_triplet",
    "jl_dimension",
    "jl_projection",
    "build_keep_nth",
    "build_mqar_mamba",
    "build_mqar_mamba2",
    "build_mqar_s4d",
    "build_induction_heads_dt",
    "build_time_recovery",
    "run_time_recovery",
    "BUILDERS",
]

JL_DELTA = 0.1


# ---------------------------------------------------------------------------
# basis functions and wavelets


@dataclass(frozen=True)
class BasisSpec:
    lam: float
    b_coeff: float
    w_delta: float
    b_delta: float
    t_end: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("rate must be nonnegative")


@dataclass(frozen=True)
class WaveletIndex:
    j: int
    k: int

    def __post_init__(self):
        if self.j < 0 or not 0 <= self.k < 2 ** self.j:
            raise ValueError(f"need j >= 0 and 0 <= k < 2^j (got j={self.j}, k={self.k})")

    def breakpoints(self) -> tuple[float, float, float]:
        lo = self.k / 2 ** self.j
        return lo, lo + 2.0 ** -(self.j + 1), (self.k + 1) / 2 ** self.j


def eval_mamba_basis(spec: BasisSpec, s, step: float = 1e-4):
    """g(s) with the Δ integral taken by composite trapezoid of width ``step``.

    The grid runs down from ``t_end``; the last, partial panel ends at s.
    """
    s_arr = np.asarray(s, dtype=np.float64)
    t_end = spec.t_end
    if np.any(s_arr < 0) or np.any(s_arr > t_end):
        raise ValueError(f"s must lie in [0, {t_end}]")
    if step <= 0:
        raise ValueError("quadrature step must be positive")
    f = lambda r: np_softplus(spec.w_delta * np.asarray(r, dtype=np.float64) + spec.b_delta)
    n_panels = int(math.ceil(t_end / step - 1e-9))
    grid = t_end - step * np.arange(n_panels + 1)
    grid[-1] = max(grid[-1], 0.0)
    fg = f(grid)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (fg[1:] + fg[:-1]) * (grid[:-1] - grid[1:]))])
    flat = s_arr.reshape(-1)
    idx = np.clip(np.floor((t_end - flat) / step + 1e-9).astype(np.int64), 0, n_panels)
    r_i = grid[idx]
    integral = cum[idx] + 0.5 * (r_i - flat) * (f(flat) + fg[idx])
    log_mag = -spec.lam * integral
    if spec.b_coeff == 0:
        out = np.zeros_like(flat)
    else:
        out = math.copysign(1.0, spec.b_coeff) * np.exp(math.log(abs(spec.b_coeff)) + log_mag)
    out = out.reshape(s_arr.shape)
    return float(out) if out.ndim == 0 else out


def haar_psi(idx: WaveletIndex, s):
    """Reference ψ_{j,k}(s) = 2^{j/2} ψ(2^j s - k) on half-open intervals."""
    s = np.asarray(s, dtype=np.float64)
    lo, mid, hi = idx.breakpoints()
    amp = 2.0 ** (idx.j / 2)
    return amp * (((s >= lo) & (s < mid)).astype(float) - ((s >= mid) & (s < hi)).astype(float))


def build_wavelet_triplet(idx: WaveletIndex, w_delta: float = -1e4) -> tuple:
    """Three Heaviside-like bases whose combination g1 + g3 - 2 g2 ≈ ψ_{j,k}."""
    if w_delta > -1e2:
        raise ValueError("w_delta must be <= -1e2")
    amp = 2.0 ** (idx.j / 2)
    return tuple(BasisSpec(1.0, amp, w_delta, -w_delta * p) for p in idx.breakpoints())


def eval_wavelet_triplet(specs, s, step: float = 1e-4):
    g1, g2, g3 = (eval_mamba_basis(sp, s, step) for sp in specs)
    return g1 + g3 - 2.0 * g2


# ---------------------------------------------------------------------------
# random projections


@dataclass
class JlProjection:
    p: int
    matrix: np.ndarray
    epsilon: float
    target_epsilon: float
    seed: int
    resamples: int

    def gram_offdiag_max(self) -> float:
        G = self.matrix.T @ self.matrix
        np.fill_diagonal(G, 0.0)
        return float(np.abs(G).max()) if G.size else 0.0


def jl_dimension(n_vectors: int, epsilon: float, delta: float = JL_DELTA) -> int:
    return int(math.ceil(4.0 / epsilon ** 2 * math.log(n_vectors / delta)))


def jl_projection(d: int, epsilon: float, seed: int = 0, max_resamples: int = 100,
                  append_ones: bool = False) -> JlProjection:
    """Random ±1/√p matrix whose d columns are pairwise ε-orthogonal.

    With ``append_ones`` a (d+1)-th column 1/√p is added before the check and
    p is sized for d+1 vectors.
    """
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    n_cols = d + 1 if append_ones else d
    p = jl_dimension(n_cols, epsilon)
    rng = np.random.default_rng(seed)
    best = math.inf
    for attempt in range(1, max_resamples + 1):
        M = rng.choice(np.array([-1.0, 1.0]), size=(p, d)) / math.sqrt(p)
        if append_ones:
            M = np.concatenate([M, np.full((p, 1), 1.0 / math.sqrt(p))], axis=1)
        G = M.T @ M
        np.fill_diagonal(G, 0.0)
        eps = float(np.abs(G).max()) if n_cols > 1 else 0.0
        best = min(best, eps)
        if eps <= epsilon:
            return JlProjection(p, M, eps, epsilon, seed, attempt)
    raise RuntimeError(f"no projection met epsilon={epsilon} in {max_resamples} draws (best {best:.4f})")


# ---------------------------------------------------------------------------
# block builders


def _zeros_block_params(d: int, N: int, vocab: int, n_classes: int) -> dict:
    return {
        "embedding": np.zeros((vocab, d)),
        "out.w": np.zeros((n_classes, d)),
        "out.b": np.zeros(n_classes),
    }


def _provenance(builder: str, **args) -> dict:
    return {"builder": builder, "args": args, "seed": args.get("seed")}


def build_keep_nth(n: int, T: int, vocab: int, d: int | None = None, N: int = 1,
                   w_delta: float = 1e4, lam: float = 100.0) -> MambaBlock:
    """Simplified Mamba + PE that outputs x_n at every t >= n.

    Δ_t = softplus(w (n - t)) read off the position channel: huge before n
    (state erased), ln 2 at t = n (the large rate erases the previous write
    while x_n is stored with weight ln 2) and exactly 0 afterwards (state and
    input frozen).
    """
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T (n={n}, T={T})")
    d = vocab + 1 if d is None else d
    if d < vocab + 1:
        raise ValueError("d must be at least vocab + 1 (one-hot tokens plus position)")
    if lam * math.log(2.0) < 20.0:
        raise ValueError("rate too small to erase at the write step")
    n_classes = vocab + 1
    p = _zeros_block_params(d, N, vocab + 1, n_classes)
    p["embedding"] = np.zeros((vocab + 1, d - 1))
    p["embedding"][1:, :vocab] = np.eye(vocab)
    p["lam"] = np.full((d, N), float(lam))
    p["delta.w"] = np.zeros((d, d))
    p["delta.w"][:, d - 1] = -w_delta * T
    p["delta.b"] = np.full(d, w_delta * n)
    p["B.w"] = np.zeros((N, d))
    p["B.b"] = np.ones(N)
    p["C.w"] = np.zeros((N, d))
    p["C.b"] = np.full(N, 1.0 / N)
    p["out.w"][1:, :vocab] = np.eye(vocab)
    return MambaBlock("mamba", vocab + 1, d, N, n_classes, p, pe=True, simplified=True,
                      provenance=_provenance("keep_nth", n=n, T=T, vocab=vocab, d=d, N=N, w_delta=w_delta, lam=lam))


def _conv_pair(c0: float, c1: float, bias: float, channels: int):
    c = np.stack([np.full(channels, c0), np.full(channels, c1)])
    return c, np.full(channels, bias)


def build_mqar_mamba(kappa: int, vocab: int, mode: str = "onehot", epsilon: float = 0.1,
                     seed: int = 0) -> MambaBlock:
    """Ungated Mamba solving MQAR with one state column per key.

    The size-2 conv turns each (key, value) pair into key + value content
    while B = C = key-subspace projection routes it into the key's column.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if mode == "onehot":
        k, v, c0, c1, b = 2.0, 1.0, 1.0, 2.0, 1.0
        p_v = vocab
        value_emb = v * np.eye(vocab)
        shift = 0.0
        proj = None
    elif mode == "jl":
        k, beta, c0, c1, b = 10.0, 2.0, 1.0, 10.0, 3.0
        proj = jl_projection(vocab, epsilon, seed)
        p_v = proj.p
        value_emb = proj.matrix.T + beta
        shift = c1 * beta - b
    else:
        raise ValueError("mode must be 'onehot' or 'jl'")
    d, N = kappa + p_v, kappa
    rows = kappa + vocab + 1
    P = _zeros_block_params(d, N, rows, vocab + 1)
    P["embedding"][1:kappa + 1, :kappa] = k * np.eye(kappa)
    P["embedding"][kappa + 1:, kappa:] = value_emb
    P["conv_u.c"], P["conv_u.bias"] = _conv_pair(c0, c1, b, d)
    P["lam"] = np.zeros((d, N))
    P["delta.w"] = np.zeros((d, d))
    P["delta.b"] = np.full(d, DELTA_ONE_BIAS)
    Wk = np.zeros((N, d))
    Wk[:, :kappa] = np.eye(kappa)
    P["B.w"], P["C.w"] = Wk, Wk.copy()
    P["B.b"], P["C.b"] = np.zeros(N), np.zeros(N)
    if mode == "onehot":
        P["out.w"][1:, kappa:] = value_emb
    else:
        Wo = proj.matrix.T
        P["out.w"][1:, kappa:] = Wo
        # y at a query carries (c1 k - b)(c0 k - b) * shift * 1_p in the value block
        P["out.b"][1:] = -(c1 * k - b) * (c0 * k - b) * shift * Wo.sum(axis=1)
    return MambaBlock("mamba", rows, d, N, vocab + 1, P, conv_act="relu",
                      provenance=_provenance("mqar_mamba", kappa=kappa, vocab=vocab, mode=mode,
                                             epsilon=epsilon if mode == "jl" else None, seed=seed))


def build_mqar_mamba2(kappa: int, vocab: int, mode: str = "onehot", epsilon: float = 0.1,
                      seed: int = 0) -> MambaBlock:
    """Ungated Mamba-2 solving MQAR: y_t = Σ_s x_s ⟨W_k x_{s-1}, W_k x_t⟩.

    conv_B shifts by one step so each value is written under the preceding
    key; conv_u and conv_C are identities and λ = 0.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if mode == "onehot":
        key_emb, value_emb = np.eye(kappa), np.eye(vocab)
    elif mode == "jl":
        key_emb = jl_projection(kappa, epsilon, seed).matrix.T
        value_emb = jl_projection(vocab, epsilon, seed + 1).matrix.T
    else:
        raise ValueError("mode must be 'onehot' or 'jl'")
    p_k, p_v = key_emb.shape[1], value_emb.shape[1]
    d, N = p_k + p_v, p_k
    rows = kappa + vocab + 1
    P = _zeros_block_params(d, N, rows, vocab + 1)
    P["embedding"][1:kappa + 1, :p_k] = key_emb
    P["embedding"][kappa + 1:, p_k:] = value_emb
    Wk = np.zeros((N, d))
    Wk[:, :p_k] = np.eye(p_k)
    P["in_u.w"] = np.eye(d)
    P["in_B.w"], P["in_C.w"] = Wk, Wk.copy()
    P["conv_u.c"], P["conv_u.bias"] = _conv_pair(0.0, 1.0, 0.0, d)
    P["conv_B.c"], P["conv_B.bias"] = _conv_pair(1.0, 0.0, 0.0, N)
    P["conv_C.c"], P["conv_C.bias"] = _conv_pair(0.0, 1.0, 0.0, N)
    P["lam"] = np.zeros(1)
    P["delta.w"] = np.zeros((1, d))
    P["delta.b"] = np.array([DELTA_ONE_BIAS])
    P["out.w"][1:, p_k:] = value_emb
    return MambaBlock("mamba2", rows, d, N, vocab + 1, P, conv_act="identity",
                      provenance=_provenance("mqar_mamba2", kappa=kappa, vocab=vocab, mode=mode,
                                             epsilon=epsilon if mode == "jl" else None, seed=seed))


def build_mqar_s4d(kappa: int, vocab: int, mode: str = "onehot", epsilon: float = 0.1,
                   seed: int = 0) -> MambaBlock:
    """Gated S4D solving MQAR with one embedding chunk per key.

    The conv keeps only (key, value) pairs, writing the value into the key's
    chunk; a plain running sum stores them and the relu gate at a query
    selects the queried key's chunk.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    k, c0, c1 = 10.0, 10.0, 1.0
    b = k * c0
    if mode == "onehot":
        value_chunk = np.eye(vocab)
        readout, shift = value_chunk, 0.0
    elif mode == "jl":
        beta = 1.0
        proj = jl_projection(vocab, epsilon, seed, append_ones=True)
        readout = proj.matrix[:, :vocab].T
        value_chunk = readout + beta
        shift = beta
    else:
        raise ValueError("mode must be 'onehot' or 'jl'")
    p = value_chunk.shape[1]
    d = kappa * p
    rows = kappa + vocab + 1
    P = _zeros_block_params(d, 1, rows, vocab + 1)
    for i in range(kappa):
        P["embedding"][1 + i, i * p:(i + 1) * p] = k
    P["embedding"][kappa + 1:] = np.tile(value_chunk, (1, kappa))
    P["conv_u.c"], P["conv_u.bias"] = _conv_pair(c0, c1, b, d)
    P["lam"] = np.zeros((d, 1))
    P["B.static"] = np.ones(1)
    P["C.static"] = np.ones(1)
    P["gate.w"] = np.eye(d)
    P["gate.b"] = np.zeros(d)
    P["out.w"][1:] = np.tile(readout, (1, kappa))
    # the gate scales the queried chunk by k, which also carries the shift
    P["out.b"][1:] = -k * shift * readout.sum(axis=1)
    return MambaBlock("s4d", rows, d, 1, vocab + 1, P, conv_act="relu", gate_act="relu",
                      provenance=_provenance("mqar_s4d", kappa=kappa, vocab=vocab, mode=mode,
                                             epsilon=epsilon if mode == "jl" else None, seed=seed))


def build_induction_heads_dt(vocab: int, w_delta: float = 1e4) -> MambaBlock:
    """Mamba-Δᵀ solving induction heads with one state column per token.

    The conv pairs (x_{t-1}, x_t). Δ along the state axis is huge only in
    column x_{t-1}, which is erased and overwritten with x_t; a query reads
    column x_t.
    """
    if w_delta < 1e2:
        raise ValueError("w_delta must be >= 1e2")
    V = vocab
    d, N = 2 * V, V
    eye = np.eye(V)
    P = _zeros_block_params(d, N, V + 1, V + 1)
    P["embedding"][1:] = np.concatenate([eye, eye], axis=1)
    P["conv_u.c"] = np.stack([np.r_[np.ones(V), np.zeros(V)], np.r_[np.zeros(V), np.ones(V)]])
    P["conv_u.bias"] = np.zeros(d)
    P["lam"] = np.ones((d, N))
    first = np.concatenate([eye, np.zeros((V, V))], axis=1)
    second = np.concatenate([np.zeros((V, V)), eye], axis=1)
    P["delta.w"] = w_delta * first
    P["delta.b"] = np.full(N, -w_delta / 2)
    P["B.w"], P["B.b"] = first, np.zeros(N)
    P["C.w"], P["C.b"] = second, np.zeros(N)
    P["out.w"][1:] = second
    # an empty column gives all-zero logits; the blank wins at half the unit signal
    P["out.b"][0] = 0.5
    return MambaBlock("mamba_dt_transpose", V + 1, d, N, V + 1, P, conv_act="relu",
                      provenance=_provenance("induction_heads_dt", vocab=vocab, w_delta=w_delta))


def build_time_recovery() -> SsmParams:
    """λ = 0, B = C = 1: the state counts the steps of an all-ones input."""
    return SsmParams("s4d", np.zeros((1, 1)), static_B=np.ones(1), static_C=np.ones(1))


def run_time_recovery(T: int, params: SsmParams | None = None) -> np.ndarray:
    params = params or build_time_recovery()
    x = np.ones((T, 1))
    B = np.broadcast_to(params.static_B, (T, 1))
    C = np.broadcast_to(params.static_C, (T, 1))
    y, _ = scan_sequential("s4d", params, x, None, B, C)
    return y[:, 0]


BUILDERS = {
    "keep_nth": build_keep_nth,
    "mqar_mamba": build_mqar_mamba,
    "mqar_mamba2": build_mqar_mamba2,
    "mqar_s4d": build_mqar_s4d,
    "induction_heads_dt": build_induction_heads_dt,
}
