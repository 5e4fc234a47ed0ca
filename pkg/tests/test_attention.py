import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physattn import attention as at
from physattn import diffkernel as dk
from physattn.errors import DimensionError

import reference as ref


def P(name, data, trainable=True):
    return dk.Param(name, dk.Tensor(np.asarray(data, dtype=np.float64)), trainable)


def decay(gp, gf, dt=0.05, enabled=True):
    gp, gf = np.atleast_1d(gp), np.atleast_1d(gf)
    to_theta = np.vectorize(lambda g: at.softplus_inverse(g) if g > 0 else -800.0)
    return at.DecayBias(P("tp", to_theta(gp)[None, :]), P("tf", to_theta(gf)[None, :]), dt, enabled)


def phase(w, dt=0.05, enabled=True):
    return at.PhaseBias(P("w", np.atleast_1d(w)[None, :]), dt, enabled)


def random_mh(rng, D, H, bias, scale=0.5):
    return at.MultiHeadParams(P("wq", rng.normal(scale=scale, size=(D, D))), P("wk", rng.normal(scale=scale, size=(D, D))),
                              P("wv", rng.normal(scale=scale, size=(D, D))), P("wo", rng.normal(scale=scale, size=(D, D))),
                              bias)


# --- decay bias -------------------------------------------------------------


def test_decay_zero_rates_give_zero_matrix():
    D = at.decay_bias_matrix(6, decay(0.0, 0.0)).data
    assert np.max(np.abs(D)) < 1e-300


def test_decay_diagonal_is_exactly_zero():
    D = at.decay_bias_matrix(10, decay([0.3, 7.0], [2.0, 0.01])).data
    for h in range(2):
        assert np.all(np.diag(D[h]) == 0.0)


def test_decay_arithmetic_example():
    D = at.decay_bias_matrix(8, decay(2.0, 1.0)).data[0]
    assert D[5, 3] == pytest.approx(-0.2, abs=1e-15)


def test_decay_disabled_is_zero_constant():
    b = decay(0.5, 0.5, enabled=False)
    D = at.decay_bias_matrix(5, b)
    assert not D.requires_grad
    np.testing.assert_array_equal(D.data, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.floats(-6, 6), st.floats(-6, 6), st.sampled_from([0.01, 0.05, 0.1]))
def test_decay_matches_closed_form_and_is_monotone(L, tp, tf, dt):
    b = at.DecayBias(P("tp", [[tp]]), P("tf", [[tf]]), dt)
    gp, gf = ref.softplus(tp), ref.softplus(tf)
    D = at.decay_bias_matrix(L, b).data[0]
    np.testing.assert_allclose(D, ref.decay_bias(L, gp, gf, dt), rtol=0, atol=1e-12)
    assert np.all(D <= 0)
    assert gp >= 0 and gf >= 0
    for i in range(L):
        row = D[i]
        assert np.all(np.diff(row[: i + 1]) >= 0)  # rises towards the diagonal
        assert np.all(np.diff(row[i:]) <= 0)


# --- phase bias -------------------------------------------------------------


def test_phase_exact_cases():
    dt = 0.05
    # integer cycles: w |i-j| dt = n
    B = at.phase_bias_matrix(9, phase(2.5, dt)).data[0]  # 2.5*8*0.05 = 1.0
    assert B[0, 8] == pytest.approx(1.0, abs=1e-12)
    # quarter cycle: w * 1 * dt = 1/4
    B = at.phase_bias_matrix(6, phase(5.0, dt)).data[0]
    assert B[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert B[0, 5] == pytest.approx(0.0, abs=1e-12)  # 1.25 cycles
    # half cycle
    assert B[0, 2] == pytest.approx(-1.0, abs=1e-12)
    assert B[3, 3] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.floats(-5, 5), st.sampled_from([0.01, 0.05, 0.1]))
def test_phase_matches_closed_form_with_structure(L, w, dt):
    B = at.phase_bias_matrix(L, phase(w, dt)).data[0]
    np.testing.assert_allclose(B, ref.phase_bias(L, w, dt), rtol=0, atol=1e-12)
    assert np.all(np.abs(B) <= 1.0)
    np.testing.assert_array_equal(B, B.T)
    assert np.all(np.diag(B) == 1.0)
    for k in range(1, L):  # Toeplitz
        d = np.diag(B, k)
        assert np.ptp(d) == 0.0


def test_phase_period_along_off_diagonal():
    w, dt = 2.0, 0.05  # period 1/(w dt) = 10 steps
    B = at.phase_bias_matrix(40, phase(w, dt)).data[0]
    np.testing.assert_allclose(B[0, :30], B[0, 10:40], atol=1e-12)


# --- attention semantics ----------------------------------------------------


def test_dbsa_zero_qk_and_zero_decay_is_uniform():
    rng = np.random.default_rng(0)
    L, D = 6, 4
    p = random_mh(rng, D, 2, decay([0.0, 0.0], [0.0, 0.0]))
    p.w_q.value.data[:] = 0
    p.w_k.value.data[:] = 0
    X = rng.normal(size=(L, D))
    out = at.dbsa_forward(dk.Tensor(X), p).data
    expected = (X @ p.w_v.value.data).mean(axis=0) @ p.w_o.value.data
    np.testing.assert_allclose(out, np.tile(expected, (L, 1)), atol=1e-12)


def test_dbsa_huge_decay_is_identity_attention():
    rng = np.random.default_rng(1)
    L, D = 5, 4
    p = random_mh(rng, D, 2, decay([1e6, 1e6], [1e6, 1e6]))
    p.w_q.value.data[:] = 0
    p.w_k.value.data[:] = 0
    X = rng.normal(size=(L, D))
    out = at.dbsa_forward(dk.Tensor(X), p).data
    np.testing.assert_allclose(out, X @ p.w_v.value.data @ p.w_o.value.data, atol=1e-6)


def _check_monotone_weights(w):
    L = w.shape[-1]
    for i in range(L):
        for j in range(i):
            if not w[i, j] < w[i, j + 1]:
                return False
        for j in range(i, L - 1):
            if not w[i, j] > w[i, j + 1]:
                return False
    return True


def test_decay_monotonicity_and_row_stochasticity_1000_trials():
    rng = np.random.default_rng(2)
    for trial in range(1000):
        L = int(rng.integers(2, 33))
        H = int(rng.choice([1, 2, 4]))
        D = H * int(rng.integers(1, 4))
        gp = rng.uniform(0.05, 20.0, size=H)
        gf = rng.uniform(0.05, 20.0, size=H)
        p = random_mh(rng, D, H, decay(gp, gf))
        p.w_q.value.data[:] = 0
        p.w_k.value.data[:] = 0
        cap = []
        at.dbsa_forward(dk.Tensor(rng.normal(size=(L, D))), p, capture=cap)
        w = cap[0]
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-6
        for h in range(H):
            assert _check_monotone_weights(w[h]), (trial, h)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**32 - 1))
def test_attention_weights_row_stochastic(L, H, seed):
    rng = np.random.default_rng(seed)
    D = 2 * H
    cap = []
    at.dbsa_forward(dk.Tensor(rng.normal(size=(L, D))),
                    random_mh(rng, D, H, decay(rng.uniform(0, 3, H), rng.uniform(0, 3, H))), capture=cap)
    at.phase_attention(dk.Tensor(rng.normal(size=(L, D))), dk.Tensor(rng.normal(size=(L, D))),
                       random_mh(rng, D, H, phase(rng.uniform(-2, 2, H))), capture=cap)
    for w in cap:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_dbsa_matches_naive_reference():
    rng = np.random.default_rng(3)
    L, H, d = 4, 2, 3
    D = H * d
    b = decay([0.7, 2.5], [1.1, 0.2])
    p = random_mh(rng, D, H, b)
    X = rng.normal(size=(L, D))
    gp, gf = b.rates()
    biases = [ref.decay_bias(L, gp[h], gf[h], b.dt) for h in range(H)]
    expected = ref.attention(X, X, p.w_q.value.data, p.w_k.value.data, p.w_v.value.data, p.w_o.value.data, biases)
    np.testing.assert_allclose(at.dbsa_forward(dk.Tensor(X), p).data, expected, rtol=0, atol=1e-10)


def test_phase_attention_without_bias_is_plain_cross_attention():
    rng = np.random.default_rng(4)
    L, D = 5, 4
    p = random_mh(rng, D, 2, phase([0.3, 0.9], enabled=False))
    q, kv = rng.normal(size=(L, D)), rng.normal(size=(L, D))
    zeros = [np.zeros((L, L))] * 2
    expected = ref.attention(q, kv, p.w_q.value.data, p.w_k.value.data, p.w_v.value.data, p.w_o.value.data, zeros)
    np.testing.assert_allclose(at.phase_attention(dk.Tensor(q), dk.Tensor(kv), p).data, expected, atol=1e-12)


def test_phase_attention_identical_values_give_identical_rows():
    rng = np.random.default_rng(5)
    L, D = 6, 4
    p = random_mh(rng, D, 2, phase([0.25, 0.5]))
    kv = np.tile(rng.normal(size=(1, D)), (L, 1))
    out = at.phase_attention(dk.Tensor(rng.normal(size=(L, D))), dk.Tensor(kv), p).data
    np.testing.assert_allclose(out, np.tile(out[0], (L, 1)), atol=1e-12)


def test_phase_attention_matches_naive_reference():
    rng = np.random.default_rng(6)
    L, H, d = 5, 2, 2
    D = H * d
    b = phase([0.37, -1.2])
    p = random_mh(rng, D, H, b)
    q, kv = rng.normal(size=(L, D)), rng.normal(size=(L, D))
    biases = [ref.phase_bias(L, b.w.value.data[0, h], b.dt) for h in range(H)]
    expected = ref.attention(q, kv, p.w_q.value.data, p.w_k.value.data, p.w_v.value.data, p.w_o.value.data, biases)
    np.testing.assert_allclose(at.phase_attention(dk.Tensor(q), dk.Tensor(kv), p).data, expected, rtol=0, atol=1e-10)


def test_phase_attention_rejects_unequal_lengths():
    rng = np.random.default_rng(7)
    p = random_mh(rng, 4, 2, phase([0.25, 0.5]))
    with pytest.raises(DimensionError):
        at.phase_attention(dk.Tensor(np.ones((5, 4))), dk.Tensor(np.ones((6, 4))), p)


def test_pdgbca_is_composition_of_two_phase_attentions():
    rng = np.random.default_rng(8)
    L, D = 4, 4
    s1 = random_mh(rng, D, 2, phase([0.25, 0.5]))
    s2 = random_mh(rng, D, 2, phase([0.75, 1.0]))
    ext, intl = dk.Tensor(rng.normal(size=(L, D))), dk.Tensor(rng.normal(size=(L, D)))
    out = at.pdgbca_forward(ext, intl, s1, s2).data
    stage1 = at.phase_attention(intl, ext, s1)
    np.testing.assert_allclose(out, at.phase_attention(ext, stage1, s2).data, rtol=0, atol=1e-12)
    assert out.shape == (L, D)
    # naive reference too
    b1 = [ref.phase_bias(L, w, 0.05) for w in (0.25, 0.5)]
    b2 = [ref.phase_bias(L, w, 0.05) for w in (0.75, 1.0)]
    r1 = ref.attention(intl.data, ext.data, s1.w_q.value.data, s1.w_k.value.data, s1.w_v.value.data,
                       s1.w_o.value.data, b1)
    r2 = ref.attention(ext.data, r1, s2.w_q.value.data, s2.w_k.value.data, s2.w_v.value.data, s2.w_o.value.data, b2)
    np.testing.assert_allclose(out, r2, rtol=0, atol=1e-10)


def test_pdgbca_constant_inputs_give_constant_rows():
    rng = np.random.default_rng(9)
    L, D = 6, 4
    s1 = random_mh(rng, D, 2, phase([0.25, 0.5]))
    s2 = random_mh(rng, D, 2, phase([0.75, 1.0]))
    ext = np.tile(rng.normal(size=(1, D)), (L, 1))
    intl = np.tile(rng.normal(size=(1, D)), (L, 1))
    out = at.pdgbca_forward(dk.Tensor(ext), dk.Tensor(intl), s1, s2).data
    np.testing.assert_allclose(out, np.tile(out[0], (L, 1)), atol=1e-12)


def test_pdgbca_capture_keys():
    rng = np.random.default_rng(10)
    s1 = random_mh(rng, 4, 2, phase([0.25, 0.5]))
    s2 = random_mh(rng, 4, 2, phase([0.75, 1.0]))
    cap = {}
    at.pdgbca_forward(dk.Tensor(rng.normal(size=(5, 4))), dk.Tensor(rng.normal(size=(5, 4))), s1, s2, capture=cap)
    assert cap["bca_stage1"][0].shape == (2, 5, 5)
    assert cap["bca_stage2"][0].shape == (2, 5, 5)


# --- GCF --------------------------------------------------------------------


def _head(rng, D, C, q=None):
    return at.GCFHead(P("q", np.zeros((1, D)) if q is None else q), P("w", rng.normal(size=(2 * D, C))),
                      P("b", rng.normal(size=(1, C))))


def test_pool_of_identical_rows_is_that_row():
    rng = np.random.default_rng(11)
    row = rng.normal(size=(1, 5))
    s = at.attention_pool(dk.Tensor(rng.normal(size=(1, 5))), dk.Tensor(np.tile(row, (7, 1)))).data
    np.testing.assert_allclose(s, row, rtol=0, atol=1e-15)


def test_zero_query_pool_is_mean():
    rng = np.random.default_rng(12)
    seq = rng.normal(size=(7, 5))
    s = at.attention_pool(dk.Tensor(np.zeros((1, 5))), dk.Tensor(seq)).data
    np.testing.assert_allclose(s, seq.mean(axis=0, keepdims=True), atol=1e-15)


def test_gcf_matches_naive_reference():
    rng = np.random.default_rng(13)
    L, D, C = 6, 4, 2
    head = _head(rng, D, C, q=rng.normal(size=(1, D)))
    a, b = rng.normal(size=(L, D)), rng.normal(size=(L, D))
    out = at.gcf_fuse(dk.Tensor(a), dk.Tensor(b), head).data
    expected = ref.gcf(a, b, head.q_global.value.data, head.w.value.data, head.b.value.data)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_gcf_rejects_mismatched_streams():
    rng = np.random.default_rng(14)
    with pytest.raises(DimensionError):
        at.gcf_fuse(dk.Tensor(np.ones((5, 4))), dk.Tensor(np.ones((6, 4))), _head(rng, 4, 2))


# --- gradients and direction sensitivity ------------------------------------


def test_bias_parameter_gradients():
    rng = np.random.default_rng(15)
    L, D = 6, 4
    p = random_mh(rng, D, 2, decay([0.7, 0.2], [1.5, 0.4]))
    X = dk.Tensor(rng.normal(size=(L, D)))
    T = dk.Tensor(rng.normal(size=(L, D)))
    err = dk.grad_check(lambda: dk.total(dk.mul(at.dbsa_forward(X, p), T)), p.params())
    assert err < 1e-3
    q = random_mh(rng, D, 2, phase([0.4, 1.3]))
    kv = dk.Tensor(rng.normal(size=(L, D)))
    err = dk.grad_check(lambda: dk.total(dk.mul(at.phase_attention(X, kv, q), T)), q.params())
    assert err < 1e-3


def test_dbsa_is_direction_sensitive_when_rates_differ():
    rng = np.random.default_rng(16)
    L, D = 8, 4
    p = random_mh(rng, D, 2, decay([3.0, 3.0], [0.1, 0.1]))
    p.w_q.value.data[:] = 0
    p.w_k.value.data[:] = 0
    X = rng.normal(size=(L, D))
    fwd = at.dbsa_forward(dk.Tensor(X), p).data
    rev = at.dbsa_forward(dk.Tensor(X[::-1].copy()), p).data[::-1]
    assert np.max(np.abs(fwd - rev)) > 1e-3
    # a symmetric bias makes the layer reversal-equivariant, even with live projections
    p2 = random_mh(rng, D, 2, decay([1.0, 2.0], [1.0, 2.0]))
    fwd = at.dbsa_forward(dk.Tensor(X), p2).data
    rev = at.dbsa_forward(dk.Tensor(X[::-1].copy()), p2).data[::-1]
    np.testing.assert_allclose(fwd, rev, rtol=0, atol=1e-12)


def test_scaling_applies_to_feature_term_only():
    rng = np.random.default_rng(17)
    L, D, H = 5, 8, 2
    b = decay([0.9, 0.3], [0.2, 1.4])
    p = random_mh(rng, D, H, b)
    X = rng.normal(size=(L, D))
    cap = []
    at.dbsa_forward(dk.Tensor(X), p, capture=cap)
    d = D // H
    gp, gf = b.rates()
    for h in range(H):
        Q = X @ p.w_q.value.data[:, h * d:(h + 1) * d]
        K = X @ p.w_k.value.data[:, h * d:(h + 1) * d]
        logits = Q @ K.T / math.sqrt(d) + ref.decay_bias(L, gp[h], gf[h], b.dt)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(cap[0][h], e / e.sum(axis=1, keepdims=True), atol=1e-12)


def test_attention_csv_round_trip(tmp_path):
    w = np.random.default_rng(18).dirichlet(np.ones(6), size=6)
    at.write_attention_csv(w, tmp_path / "w.csv")
    np.testing.assert_array_equal(at.read_attention_csv(tmp_path / "w.csv"), w)
