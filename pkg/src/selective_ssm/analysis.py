"""Sensitivity of the state to past inputs, decay histograms, approximation rates."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .constructions import WaveletIndex, build_wavelet_triplet, eval_wavelet_triplet
from .mixers import MambaBlock, block_forward, scan_sequential
from .tasks import stack
from .tensor_core import np_sigmoid, np_softplus

__all__ = [
    "ScalarSsm",
    "SensitivityReport",
    "scalar_states",
    "sensitivity_analytic",
    "sensitivity_fd",
    "sensitivity_report",
    "check_small_rate_bound",
    "DecayHistogram",
    "decay_histogram",
    "PiecewiseConstant",
    "ApproxRateReport",
    "approx_rate",
    "fit_slope",
]


# ---------------------------------------------------------------------------
# sensitivity


@dataclass
class ScalarSsm:
    """Single-input diagonal SSM with N state components.

    ``kind='s6'``: Δ(x) = softplus(w_delta x + b_delta) and
    B_n(x) = w_b[n] x + b_b[n]. ``kind='s4d'``: Δ ≡ 1 and B_n = b_b[n].
    """

    kind: str
    lam: np.ndarray
    b_b: np.ndarray
    w_b: np.ndarray | None = None
    w_delta: float = 0.0
    b_delta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("s4d", "s6"):
            raise ValueError("kind must be 's4d' or 's6'")
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        self.b_b = np.asarray(self.b_b, dtype=np.float64).reshape(-1)
        self.w_b = np.zeros_like(self.b_b) if self.w_b is None else np.asarray(self.w_b, dtype=np.float64).reshape(-1)
        if np.any(self.lam < 0):
            raise ValueError("rates must be nonnegative")
        if not (self.lam.shape == self.b_b.shape == self.w_b.shape):
            raise ValueError("lam, b_b and w_b must all have length N")

    @property
    def N(self) -> int:
        return self.lam.shape[0]

    def delta(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "s4d":
            return np.ones_like(x)
        return np_softplus(self.w_delta * x + self.b_delta)

    def delta_prime(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "s4d":
            return np.zeros_like(x)
        return self.w_delta * np_sigmoid(self.w_delta * x + self.b_delta)

    def B(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "s4d":
            return np.broadcast_to(self.b_b, x.shape + (self.N,))
        return x[..., None] * self.w_b + self.b_b


def scalar_states(params: ScalarSsm, x) -> np.ndarray:
    """States h_1..h_T (T, N) computed with the generic mixer scan."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    T = x.shape[0]
    Bm = params.B(x)
    out = np.empty((T, params.N))
    # read component n of h_t through C = e_n
    for n in range(params.N):
        C = np.zeros((T, params.N))
        C[:, n] = 1.0
        if params.kind == "s4d":
            y, _ = scan_sequential("s4d", None, x[:, None], None, Bm, C, lam=params.lam)
        else:
            y, _ = scan_sequential("mamba", None, x[:, None], params.delta(x)[:, None], Bm, C,
                                   lam=params.lam[None, :])
        out[:, n] = y[:, 0]
    return out


def _check_indices(x, t, j, n, N):
    T = len(x)
    if not 1 <= t <= T:
        raise ValueError(f"t must lie in [1, {T}]")
    if not 1 <= j or j >= t:
        raise ValueError("need 1 <= j < t")
    if not 0 <= n < N:
        raise ValueError(f"component n must lie in [0, {N})")


def sensitivity_analytic(kind: str, params: ScalarSsm, x, t: int, j: int, n: int = 0) -> float:
    """∂h_{t,n}/∂x_j (1-based t, j) from the product-of-decays closed form.

    value = Π_{r=j+1}^t ā_r · (d/dx[B_n(x) Δ(x) x] at x_j + ∂ā_j/∂x_j · h_{j-1,n})
    with ā_r = exp(-λ_n Δ(x_r)).
    """
    if kind != params.kind:
        raise ValueError(f"params are {params.kind}, asked for {kind}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_indices(x, t, j, n, params.N)
    lam = params.lam[n]
    D = params.delta(x)
    Bn = params.B(x)[:, n]
    abar = np.exp(-lam * D)
    h_prev = 0.0
    for s in range(j - 1):
        h_prev = abar[s] * h_prev + Bn[s] * D[s] * x[s]
    xj, Dj, Bj = x[j - 1], D[j - 1], Bn[j - 1]
    dDj = params.delta_prime(xj)
    dBj = 0.0 if params.kind == "s4d" else params.w_b[n]
    d_input = dBj * Dj * xj + Bj * dDj * xj + Bj * Dj
    d_decay = -lam * dDj * abar[j - 1]
    carry = float(np.exp(-lam * D[j:t].sum()))
    return carry * (d_input + d_decay * h_prev)


def sensitivity_fd(scan, x, t: int, j: int, n: int = 0, step: float = 1e-6) -> float:
    """Central difference of ``scan(x)[t-1, n]`` in x_j."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    xp, xm = x.copy(), x.copy()
    xp[j - 1] += step
    xm[j - 1] -= step
    return float((np.asarray(scan(xp))[t - 1, n] - np.asarray(scan(xm))[t - 1, n]) / (2 * step))


@dataclass
class SensitivityReport:
    t: int
    j: int
    n: int
    analytic: float
    fd: float
    decay_exponent: float
    rate_budget: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.fd) / max(abs(self.analytic), 1e-12)

    def to_dict(self) -> dict:
        return asdict(self) | {"rel_error": self.rel_error}


def sensitivity_report(params: ScalarSsm, x, t: int, j: int, n: int = 0, step: float = 1e-6) -> SensitivityReport:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = sensitivity_analytic(params.kind, params, x, t, j, n)
    fd = sensitivity_fd(lambda z: scalar_states(params, z), x, t, j, n, step)
    D = params.delta(x)
    lam = params.lam[n]
    return SensitivityReport(t, j, n, a, fd, float(lam * D[j:t].sum()), float(lam * D[:t].sum()))


@dataclass
class SmallRateBound:
    holds: bool
    stat: float
    c: float
    lower_bound: float | None
    sensitivity: float
    bound_satisfied: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def check_small_rate_bound(params: ScalarSsm, x, c: float, j: int = 1, n: int = 0,
                           strict: bool = True) -> SmallRateBound:
    """Test λ_n Σ_{r≤T} Δ(x_r) ≤ c and, if so, the lower bound on |∂h_T/∂x_j|.

    The bound is e^{-c}·|d/dx[B_n(x) Δ(x) x]| at x_j. With ``strict`` a
    violated bound raises AssertionError (1e-9 slack).
    """
    if params.kind != "s6":
        raise ValueError("the condition concerns the selective (s6) model")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    T = len(x)
    D = params.delta(x)
    stat = float(params.lam[n] * D.sum())
    sens = sensitivity_analytic("s6", params, x, T, j, n)
    if stat > c:
        return SmallRateBound(False, stat, c, None, sens, None)
    xj, Dj = x[j - 1], D[j - 1]
    Bj = params.B(x)[j - 1, n]
    d_input = params.w_b[n] * Dj * xj + Bj * params.delta_prime(xj) * xj + Bj * Dj
    bound = math.exp(-c) * abs(d_input)
    ok = bool(abs(sens) >= bound - 1e-9)
    if strict and not ok:
        raise AssertionError(f"|dh_T/dx_j| = {abs(sens):.3e} below bound {bound:.3e}")
    return SmallRateBound(True, stat, c, bound, sens, ok)


# ---------------------------------------------------------------------------
# decay histograms


@dataclass
class DecayHistogram:
    edges: np.ndarray
    counts: dict
    model_id: str = ""
    dataset_id: str = ""

    def total(self, group: str) -> int:
        return int(self.counts[group].sum())

    def proportion(self, group: str, lo: float, hi: float) -> float:
        """Share of a group's mass in bins lying inside [lo, hi]."""
        left, right = self.edges[:-1], self.edges[1:]
        sel = (left >= lo - 1e-12) & (right <= hi + 1e-12)
        c = self.counts[group]
        return float(c[sel].sum() / c.sum()) if c.sum() else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "bin_left", "bin_right", "group", "count"])
        for g in sorted(self.counts):
            for lo, hi, cnt in zip(self.edges[:-1], self.edges[1:], self.counts[g]):
                w.writerow([1, f"{lo:.6g}", f"{hi:.6g}", g, int(cnt)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "edges": [float(e) for e in self.edges],
            "counts": {g: [int(c) for c in v] for g, v in sorted(self.counts.items())},
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
        }


def decay_histogram(model: MambaBlock, instances, bins: int = 20, group_by: str = "timestep",
                    marker: int | None = None, batch_size: int = 200, model_id: str = "",
                    dataset_id: str = "") -> DecayHistogram:
    """Histogram of every decay factor exp(-λΔ_t) produced on the instances.

    ``timestep`` splits steps t < marker ("before") from t >= marker
    ("after"), 1-based; ``sequence_length`` uses one group "T=<len>".
    """
    if group_by not in ("timestep", "sequence_length"):
        raise ValueError("group_by must be 'timestep' or 'sequence_length'")
    if group_by == "timestep" and marker is None:
        raise ValueError("timestep grouping needs a marker position")
    X, _, _ = stack(list(instances)) if not isinstance(instances, tuple) else instances
    T = X.shape[1]
    edges = np.linspace(0.0, 1.0, bins + 1)
    if group_by == "timestep":
        groups = {"before": np.zeros(bins, dtype=np.int64), "after": np.zeros(bins, dtype=np.int64)}
    else:
        groups = {f"T={T}": np.zeros(bins, dtype=np.int64)}
    for i in range(0, len(X), batch_size):
        trace = {}
        block_forward(model, X[i:i + batch_size], trace=trace)
        dec = np.clip(trace["decay"], 0.0, 1.0)
        if group_by == "timestep":
            groups["before"] += np.histogram(dec[:, :marker - 1], bins=edges)[0]
            groups["after"] += np.histogram(dec[:, marker - 1:], bins=edges)[0]
        else:
            groups[f"T={T}"] += np.histogram(dec, bins=edges)[0]
    return DecayHistogram(edges, groups, model_id, dataset_id)


# ---------------------------------------------------------------------------
# approximation rates


@dataclass(frozen=True)
class PiecewiseConstant:
    """Step function on [0, 1]: ``values[i]`` between consecutive jumps."""

    jumps: tuple
    values: tuple

    def __post_init__(self):
        if len(self.values) != len(self.jumps) + 1:
            raise ValueError("need one more value than jumps")
        if any(not 0 < a < 1 for a in self.jumps) or list(self.jumps) != sorted(self.jumps):
            raise ValueError("jumps must be sorted and inside (0, 1)")

    @classmethod
    def heaviside(cls, at: float = 0.5) -> "PiecewiseConstant":
        return cls((at,), (0.0, 1.0))

    @property
    def m(self) -> int:
        return len(self.jumps)

    def pieces(self):
        pts = (0.0,) + tuple(self.jumps) + (1.0,)
        return [(pts[i], pts[i + 1], self.values[i]) for i in range(len(self.values))]

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        out = np.full(s.shape, self.values[0], dtype=np.float64)
        for a, v in zip(self.jumps, self.values[1:]):
            out = np.where(s >= a, v, out)
        return out

    def integral(self, lo: float, hi: float) -> float:
        return sum(v * max(0.0, min(b, hi) - max(a, lo)) for a, b, v in self.pieces())

    def haar_coefficient(self, idx: WaveletIndex) -> float:
        lo, mid, hi = idx.breakpoints()
        return 2.0 ** (idx.j / 2) * (self.integral(lo, mid) - self.integral(mid, hi))

    def centered_energy(self) -> float:
        mean = self.integral(0.0, 1.0)
        return sum((v - mean) ** 2 * (b - a) for a, b, v in self.pieces())

    def descriptor(self) -> dict:
        return {"type": "piecewise_constant", "jumps": list(self.jumps), "values": list(self.values), "m": self.m}


@dataclass
class ApproxRateReport:
    target: dict
    method: str
    N: list
    sq_errors: list
    slope_sq: float
    slope_l2: float
    fit_residual: float
    scale: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_slope(xs, ys) -> tuple[float, float]:
    """OLS slope and RMS residual."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)))


def _trapezoid_weights(n_points: int) -> np.ndarray:
    h = 1.0 / (n_points - 1)
    w = np.full(n_points, h)
    w[0] = w[-1] = h / 2
    return w


def _wavelet_errors(target: PiecewiseConstant, N_list, grid_log2: int, w_delta: float,
                    w_growth: float, tol: float):
    n_pts = 2 ** grid_log2 + 1
    s = np.linspace(0.0, 1.0, n_pts)
    wts = _trapezoid_weights(n_pts)
    rho = target(s)
    chosen, basis = [], [np.ones(n_pts)]
    errs, Nmax = {}, max(N_list)
    for N in range(0, Nmax + 1):
        if N > 0:
            j = N - 1
            for k in range(2 ** j):
                idx = WaveletIndex(j, k)
                if abs(target.haar_coefficient(idx)) > tol:
                    specs = build_wavelet_triplet(idx, w_delta * w_growth ** j)
                    basis.append(eval_wavelet_triplet(specs, s, step=1.0 / (n_pts - 1)))
                    chosen.append((j, k))
        if N in N_list:
            Phi = np.stack(basis, axis=1)
            sw = np.sqrt(wts)[:, None]
            coef, *_ = np.linalg.lstsq(Phi * sw, rho * sw[:, 0], rcond=None)
            r = rho - Phi @ coef
            errs[N] = float(np.sum(wts * r * r))
    return [errs[N] for N in N_list], chosen


def _fourier_errors(target: PiecewiseConstant, N_list, n_max: int):
    n = np.arange(1, n_max + 1)
    w = 2 * math.pi * n
    cos_c = np.zeros(n_max)
    sin_c = np.zeros(n_max)
    for a, b, v in target.pieces():
        cos_c += v * (np.sin(w * b) - np.sin(w * a)) / w
        sin_c += v * (np.cos(w * a) - np.cos(w * b)) / w
    energy = np.concatenate([2 * cos_c ** 2, 2 * sin_c ** 2])
    energy = np.sort(energy)[::-1]
    total = target.centered_energy()
    cum = np.concatenate([[0.0], np.cumsum(energy)])
    return [float(max(total - cum[N], 0.0)) for N in N_list]


def approx_rate(target: PiecewiseConstant, N_list, method: str = "mamba_wavelet", *, grid_log2: int = 16,
                w_delta: float | None = None, w_growth: float = 1.0, coef_tol: float = 1e-12,
                fourier_terms: int = 1 << 16) -> ApproxRateReport:
    """Squared L² error of N-term approximations and fitted decay slopes.

    ``mamba_wavelet``: at each scale j < N, every Haar wavelet with a nonzero
    coefficient is realized from three basis functions (Δ weight
    ``w_delta * w_growth**j``) and ρ is projected onto their span plus the
    constant. Slopes are fitted to log₂ error against N. The default
    ``w_delta`` makes one quadrature panel of erasure cost ~100 nats, so the
    realized steps are sharp at the grid resolution; a milder weight smears
    each jump over ~1/sqrt(|w|) and puts a floor under the error.

    ``fourier``: best N-term real trigonometric approximation beyond the
    mean, from exact coefficients and Parseval. Slopes are fitted on
    log-log axes.
    """
    N_list = sorted(int(N) for N in N_list)
    if not N_list or N_list[0] < 0:
        raise ValueError("N_list must hold nonnegative integers")
    if method == "mamba_wavelet":
        if 2.0 ** -max(N_list) < 16 * 2.0 ** -grid_log2:
            raise ValueError("finest requested scale is below the quadrature resolution")
        if w_delta is None:
            w_delta = -200.0 * 4.0 ** grid_log2
        errs, chosen = _wavelet_errors(target, N_list, grid_log2, w_delta, w_growth, coef_tol)
        xs = np.asarray(N_list, dtype=float)
        scale = "log2(error) vs N"
        details = {"wavelets": chosen, "grid_log2": grid_log2, "w_delta": w_delta, "w_growth": w_growth}
        tr = np.log2
    elif method == "fourier":
        if N_list[0] < 1:
            raise ValueError("Fourier rates need N >= 1")
        if 2 * max(N_list) > 2 * fourier_terms:
            raise ValueError("N exceeds the number of computed Fourier terms")
        errs = _fourier_errors(target, N_list, fourier_terms)
        xs = np.log(np.asarray(N_list, dtype=float))
        scale = "log(error) vs log(N)"
        details = {"fourier_terms": fourier_terms}
        tr = np.log
    else:
        raise ValueError("method must be 'mamba_wavelet' or 'fourier'")
    e = np.maximum(np.asarray(errs), 1e-300)
    slope_sq, resid = fit_slope(xs, tr(e))
    slope_l2, _ = fit_slope(xs, tr(np.sqrt(e)))
    return ApproxRateReport(target.descriptor(), method, N_list, [float(v) for v in errs], slope_sq, slope_l2,
                            resid, scale, details)


def report_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)
