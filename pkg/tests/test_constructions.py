import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selective_ssm import constructions as cs
from selective_ssm.mixers import DELTA_ONE_BIAS, block_forward, scan_sequential
from selective_ssm.tasks import TaskConfig, evaluate_accuracy, make_dataset


def argmax_at(block, tokens):
    return np.argmax(block_forward(block, np.asarray(tokens)), axis=-1)


# -- basis functions and wavelets -------------------------------------------

def test_basis_reduces_to_exponential():
    spec = cs.BasisSpec(lam=1.0, b_coeff=1.0, w_delta=0.0, b_delta=DELTA_ONE_BIAS)
    s = np.linspace(0, 1, 51)
    assert np.max(np.abs(cs.eval_mamba_basis(spec, s) - np.exp(-(1 - s)))) < 1e-12


def test_basis_approximates_heaviside():
    j = 2
    spec = cs.BasisSpec(lam=1.0, b_coeff=2 ** (j / 2), w_delta=-1e4, b_delta=1e4 * 0.5)
    s = np.linspace(0, 1, 2001)
    away = np.abs(s - 0.5) > 0.05
    ref = 2 ** (j / 2) * (s >= 0.5)
    assert np.max(np.abs(cs.eval_mamba_basis(spec, s)[away] - ref[away])) <= 1e-3


def test_basis_matches_fine_quadrature():
    spec = cs.BasisSpec(lam=0.7, b_coeff=-1.3, w_delta=3.0, b_delta=-1.0)
    s = np.array([0.0, 0.1234, 0.5, 0.9, 1.0])
    fine = cs.eval_mamba_basis(spec, s, step=1e-6)
    # independent oracle: trapezoid on a uniform grid per point
    ref = []
    for v in s:
        r = np.linspace(v, 1.0, 200001)
        f = np.log1p(np.exp(3.0 * r - 1.0))
        ref.append(-1.3 * math.exp(-0.7 * np.trapezoid(f, r)))
    assert np.max(np.abs(fine - np.array(ref))) < 1e-6
    assert np.max(np.abs(cs.eval_mamba_basis(spec, s) - fine)) < 1e-6


def test_basis_domain_errors():
    spec = cs.BasisSpec(1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        cs.eval_mamba_basis(spec, 1.5)
    with pytest.raises(ValueError):
        cs.eval_mamba_basis(spec, -0.1)
    with pytest.raises(ValueError):
        cs.BasisSpec(-1.0, 1.0, 0.0, 0.0)


def test_wavelet_breakpoints():
    assert cs.WaveletIndex(2, 1).breakpoints() == (0.25, 0.375, 0.5)
    with pytest.raises(ValueError):
        cs.WaveletIndex(1, 2)
    with pytest.raises(ValueError):
        cs.build_wavelet_triplet(cs.WaveletIndex(0, 0), w_delta=-10.0)


def test_wavelet_triplet_matches_haar():
    idx = cs.WaveletIndex(0, 0)
    specs = cs.build_wavelet_triplet(idx, w_delta=-1e4)
    s = np.linspace(0, 1, 4001)
    approx = cs.eval_wavelet_triplet(specs, s)
    off = np.ones_like(s, dtype=bool)
    for p in idx.breakpoints():
        off &= np.abs(s - p) > 0.05
    assert np.max(np.abs(approx - cs.haar_psi(idx, s))[off]) <= 0.02
    assert abs(np.trapezoid(approx, s)) <= 0.02


def test_haar_orthonormal():
    s = (np.arange(1 << 12) + 0.5) / (1 << 12)
    idxs = [cs.WaveletIndex(j, k) for j in range(4) for k in range(2 ** j)]
    G = np.array([[np.mean(cs.haar_psi(a, s) * cs.haar_psi(b, s)) for b in idxs] for a in idxs])
    assert np.allclose(G, np.eye(len(idxs)), atol=1e-12)


# -- JL projections ---------------------------------------------------------

def test_jl_dimension_closed_form():
    assert cs.jl_dimension(64, 0.3) == 288 == math.ceil(4 / 0.09 * math.log(640))


def test_jl_single_vector():
    proj = cs.jl_projection(1, 0.3)
    assert proj.epsilon == 0.0


def test_jl_invariants():
    proj = cs.jl_projection(64, 0.3, seed=2)
    M = proj.matrix
    assert M.shape == (288, 64)
    assert np.all(np.abs(np.abs(M) - 1 / math.sqrt(288)) < 1e-15)
    norms = np.sum(M * M, axis=0)
    assert np.allclose(norms, 1.0, atol=1e-14)
    worst = max(abs(float(M[:, i] @ M[:, j])) for i in range(64) for j in range(64) if i != j)
    assert abs(worst - proj.epsilon) < 1e-15 and proj.gram_offdiag_max() == proj.epsilon <= 0.3


def test_jl_bad_epsilon_and_exhaustion(monkeypatch):
    with pytest.raises(ValueError):
        cs.jl_projection(4, 0.6)
    # a 4-dimensional target cannot hold 50 near-orthogonal columns
    monkeypatch.setattr(cs, "jl_dimension", lambda n, eps, delta=cs.JL_DELTA: 4)
    with pytest.raises(RuntimeError, match="best"):
        cs.jl_projection(50, 0.1, max_resamples=3)


# -- Keep n-th ---------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 5, 50])
def test_keep_nth_construction(n):
    cfg = TaskConfig("keep_nth", T=50, vocab_size=128, n=n, seed=11)
    block = cs.build_keep_nth(n, 50, 128)
    assert evaluate_accuracy(block, make_dataset(cfg, 300)) == 1.0


def test_keep_nth_argument_errors():
    with pytest.raises(ValueError):
        cs.build_keep_nth(6, 5, 10)
    with pytest.raises(ValueError):
        cs.build_keep_nth(2, 5, 10, d=5)


def test_keep_nth_saturation():
    n, T = 5, 50
    block = cs.build_keep_nth(n, T, 16)
    trace = {}
    block_forward(block, np.arange(1, T + 1) % 16 + 1, trace=trace)
    decay = trace["decay"][0]
    assert decay[: n - 1].max() <= 1e-8
    assert decay[n:].min() >= 1 - 1e-8


# -- MQAR --------------------------------------------------------------------

def mqar_tokens(kappa, pairs, queries):
    """Keys are ids 1..κ, value v maps to id κ+v."""
    seq = []
    for k, v in pairs:
        seq += [k, kappa + v]
    return seq + queries


@pytest.mark.parametrize("builder", ["mqar_mamba", "mqar_mamba2"])
def test_mqar_worked_example(builder):
    kappa = 2
    block = cs.BUILDERS[builder](kappa, 2)
    # k1 v2 k2 v1 | k2 k1
    toks = mqar_tokens(kappa, [(1, 2), (2, 1)], [2, 1])
    pred = argmax_at(block, toks)
    assert pred[4] == 1 and pred[5] == 2


def test_mqar_s4d_worked_example():
    kappa, V = 2, 3
    block = cs.build_mqar_s4d(kappa, V)
    toks = mqar_tokens(kappa, [(2, 3), (1, 1)], [kappa + 2, 1, kappa + 1, 2])
    pred = argmax_at(block, toks)
    assert pred[5] == 1 and pred[7] == 3


def test_mqar_key_key_adjacency():
    kappa, V = 3, 4
    block = cs.build_mqar_mamba(kappa, V)
    toks = mqar_tokens(kappa, [(1, 4), (2, 2), (3, 1)], [1, 3])
    pred = argmax_at(block, toks)
    assert pred[-1] == 1 and pred[-2] == 4


def test_mqar_value_pairs_do_not_write_state():
    kappa, V = 2, 3
    block = cs.build_mqar_mamba(kappa, V)
    base = mqar_tokens(kappa, [(1, 2), (2, 3)], [])
    noisy = base + [kappa + 1, kappa + 3, kappa + 2]
    a = argmax_at(block, base + [1])[-1]
    b = argmax_at(block, noisy + [1])[-1]
    assert a == b == 2


def test_mqar_s4d_state_holds_value_onehots():
    kappa, V = 2, 3
    block = cs.build_mqar_s4d(kappa, V)
    toks = np.array(mqar_tokens(kappa, [(1, 3), (2, 2)], []))
    x = block.params["embedding"][toks]
    from selective_ssm.mixers import short_conv
    xh = short_conv(block.conv_kernel(), x)
    T = len(toks)
    y, h = scan_sequential("s4d", block.ssm_params(), xh, None, np.ones((T, 1)), np.ones((T, 1)))
    expect = np.zeros(kappa * V)
    expect[0 * V + 2] = expect[1 * V + 1] = 1.0
    assert np.allclose(h[:, 0], expect)


@pytest.mark.parametrize("builder,kappa,V", [("mqar_mamba", 4, 16), ("mqar_mamba2", 4, 16), ("mqar_s4d", 2, 8)])
def test_mqar_constructions_exact(builder, kappa, V):
    cfg = TaskConfig("mqar", T=40, vocab_size=V, kappa=kappa, seed=3)
    assert evaluate_accuracy(cs.BUILDERS[builder](kappa, V), make_dataset(cfg, 200)) == 1.0


def test_mqar_mamba_jl_mode():
    cfg = TaskConfig("mqar", T=40, vocab_size=16, kappa=4, seed=4)
    block = cs.build_mqar_mamba(4, 16, mode="jl", epsilon=0.1)
    assert evaluate_accuracy(block, make_dataset(cfg, 200)) >= 0.99


def test_mqar_s4d_jl_mode():
    cfg = TaskConfig("mqar", T=40, vocab_size=8, kappa=2, seed=4)
    block = cs.build_mqar_s4d(2, 8, mode="jl", epsilon=0.1)
    assert evaluate_accuracy(block, make_dataset(cfg, 200)) >= 0.99


def test_gate_removal_breaks_s4d_retrieval():
    cfg = TaskConfig("mqar", T=40, vocab_size=8, kappa=4, seed=5)
    data = make_dataset(cfg, 200)
    block = cs.build_mqar_s4d(4, 8)
    assert evaluate_accuracy(block, data) == 1.0
    assert evaluate_accuracy(block.without_gate(), data) < 0.5


def test_builders_respect_block_invariants():
    for name, args in [("keep_nth", (3, 10, 5)), ("mqar_mamba", (2, 4)), ("mqar_mamba2", (2, 4)),
                       ("mqar_s4d", (2, 4)), ("induction_heads_dt", (5,))]:
        block = cs.BUILDERS[name](*args)
        assert block.params["lam"].min() >= 0
        assert set(block.params) == set(block.param_shapes())
        assert block.provenance["builder"] == name


# -- induction heads ---------------------------------------------------------

def test_induction_heads_worked_example():
    block = cs.build_induction_heads_dt(4)
    pred = argmax_at(block, [2, 1, 3, 2, 4, 3, 2, 4])
    assert pred[3] == 1 and pred[5] == 2 and pred[6] == 4 and pred[7] == 3
    assert pred[0] == pred[1] == pred[2] == pred[4] == 0


def test_induction_heads_single_occurrence_is_blank():
    block = cs.build_induction_heads_dt(6)
    assert np.all(argmax_at(block, [1, 2, 3, 4, 5, 6]) == 0)


@pytest.mark.parametrize("V", [5, 10, 20])
def test_induction_heads_hard_setting(V):
    cfg = TaskConfig("induction_heads", T=100, vocab_size=V, p_hard=1.0, gamma=0.1, seed=V)
    assert evaluate_accuracy(cs.build_induction_heads_dt(V), make_dataset(cfg, 100)) == 1.0


def test_induction_heads_saturation():
    V = 5
    block = cs.build_induction_heads_dt(V)
    trace = {}
    toks = np.array([1, 2, 3, 4, 5, 1, 2])
    block_forward(block, toks, trace=trace)
    decay = trace["decay"][0, :, 0, :]
    for t in range(1, len(toks)):
        prev = toks[t - 1] - 1
        assert decay[t, prev] <= 1e-8
        others = np.delete(decay[t], prev)
        assert others.min() >= 1 - 1e-8


# -- time recovery -----------------------------------------------------------

def test_time_recovery():
    assert run_list(7) == [1, 2, 3, 4, 5, 6, 7]
    assert run_list(1) == [1]


def run_list(T):
    return [float(v) for v in cs.run_time_recovery(T)]


@given(st.integers(1, 300))
def test_time_recovery_matches_scan(T):
    y, _ = scan_sequential("s4d", cs.build_time_recovery(), np.ones((T, 1)), None, np.ones((T, 1)), np.ones((T, 1)))
    assert np.array_equal(cs.run_time_recovery(T), y[:, 0])
    assert cs.run_time_recovery(T)[-1] == T
