import numpy as np
import pytest

from mdn.chunkwise import ChunkBatch, chunk_forward, correction_values, mdn_chunkwise_forward, ut_transform
from mdn.gating import GateSeq
from mdn.recurrent import AttnInputs, DualState, mdn_recurrent_forward, mdn_step
from mdn.sampling import override_gates, random_gates, random_inputs
from mdn.tensor import max_rel_err


def _chunk(rng, C=8, d=4, dv=None, beta=None):
    dv = dv or d
    g = random_gates(rng, (C,))
    if beta is not None:
        g = GateSeq(g.log_alpha, g.log_mu, np.full(C, beta), g.eta)
    k = rng.normal(size=(C, d))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    return ChunkBatch.from_tokens(rng.normal(size=(C, d)), k, rng.normal(size=(C, dv)),
                                  g.log_alpha, g.log_mu, g.beta, g.eta), g, k


def _step_through(batch, g, k, state):
    outs, vts = [], []
    for t in range(batch.V.shape[0]):
        p = np.exp(g.log_alpha[t]) * k[t]
        vts.append(batch.V[t] - p @ state.S)
        state, o = mdn_step(state, batch.Q[t], k[t], batch.V[t], np.exp(g.log_alpha[t]), g.beta[t],
                            np.exp(g.log_mu[t]), g.eta[t], scale=1.0)
        outs.append(o)
    return np.array(outs), state, np.array(vts)


def test_ut_c1(rng):
    b, g, k = _chunk(rng, C=1)
    f = ut_transform(b)
    np.testing.assert_array_equal(f.T, [[1.0]])
    np.testing.assert_array_equal(f.U, b.V)
    np.testing.assert_allclose(f.Y, b.P)
    assert np.all(f.Z == 0)


def test_ut_beta_zero_gives_identity(rng):
    b, _, _ = _chunk(rng, C=8, beta=0.0)
    f = ut_transform(b)
    np.testing.assert_array_equal(f.T, np.eye(8))
    np.testing.assert_array_equal(f.U, b.V)


def test_ut_residual(rng):
    b, _, _ = _chunk(rng, C=32, d=16)
    f = ut_transform(b)
    A = (b.P @ b.K_eta.T) * b.coeffs.Gamma_strict
    np.testing.assert_allclose((np.eye(32) + A) @ f.T, np.eye(32), atol=1e-12)
    assert np.all(np.triu(f.T, 1) == 0) and np.all(np.diag(f.T) == 1)


def test_streams_absorb_gates(rng):
    b, g, k = _chunk(rng)
    np.testing.assert_allclose(b.P, np.exp(g.log_alpha)[:, None] * k)
    np.testing.assert_allclose(b.K_eta, g.eta[:, None] * k)


def test_correction_values_zero_state(rng):
    b, _, _ = _chunk(rng)
    f = ut_transform(b)
    np.testing.assert_array_equal(correction_values(f, DualState.zeros(4, 4)), f.U)


def test_correction_values_c1(rng):
    b, g, k = _chunk(rng, C=1)
    S = rng.normal(size=(4, 4))
    vt = correction_values(ut_transform(b), DualState(S, np.zeros((4, 4))))
    np.testing.assert_allclose(vt[0], b.V[0] - np.exp(g.log_alpha[0]) * S.T @ k[0], rtol=1e-13)


def test_correction_values_match_recurrence(rng):
    b, g, k = _chunk(rng, C=16, d=6)
    st = DualState(rng.normal(size=(6, 6)), rng.normal(size=(6, 6)))
    _, _, vts = _step_through(b, g, k, st)
    np.testing.assert_allclose(correction_values(ut_transform(b), st), vts, rtol=1e-11, atol=1e-12)


def test_chunk_forward_c1_is_one_step(rng):
    b, g, k = _chunk(rng, C=1)
    st = DualState(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    o, new, _ = chunk_forward(b, st)
    o_ref, new_ref, _ = _step_through(b, g, k, st)
    np.testing.assert_allclose(o, o_ref, atol=1e-14, rtol=1e-14)
    np.testing.assert_allclose(new.S, new_ref.S, atol=1e-14, rtol=1e-14)
    np.testing.assert_allclose(new.M, new_ref.M, atol=1e-14, rtol=1e-14)


def test_chunk_forward_zero_values(rng):
    b, _, _ = _chunk(rng)
    b.V = np.zeros_like(b.V)
    o, st, _ = chunk_forward(b, DualState.zeros(4, 4))
    assert np.all(o == 0) and np.all(st.S == 0) and np.all(st.M == 0)


def test_chunk_forward_matches_recurrence(rng):
    b, g, k = _chunk(rng, C=32, d=16)
    st = DualState(rng.normal(size=(16, 16)), rng.normal(size=(16, 16)))
    o, new, _ = chunk_forward(b, st)
    o_ref, new_ref, _ = _step_through(b, g, k, st)
    assert max_rel_err(o, o_ref) <= 1e-11
    assert max_rel_err(new.S, new_ref.S) <= 1e-11
    assert max_rel_err(new.M, new_ref.M) <= 1e-11


@pytest.mark.parametrize("T, C", [(128, 64), (100, 32), (64, 1), (65, 16), (7, 64)])
def test_forward_matches_recurrent(rng, T, C):
    x = random_inputs(rng, 2, T, 2, 16)
    init = DualState(rng.normal(size=(2, 2, 16, 16)), rng.normal(size=(2, 2, 16, 16)))
    o, fin = mdn_chunkwise_forward(x, C, init)
    o_ref, fin_ref = mdn_recurrent_forward(x, init)
    tol = 1e-13 if C == 1 else 1e-10
    assert max_rel_err(o, o_ref) <= tol
    assert max_rel_err(fin.S, fin_ref.S) <= tol
    assert max_rel_err(fin.M, fin_ref.M) <= tol


def test_forward_f32(rng):
    x = random_inputs(rng, 2, 128, 2, 16)
    o_ref, _ = mdn_recurrent_forward(x)
    o, _ = mdn_chunkwise_forward(x.astype(np.float32), 64)
    assert o.dtype == np.float32
    assert max_rel_err(o, o_ref) <= 3e-3


def test_random_finals_match(rng):
    x = random_inputs(rng, 2, 64, 2, 16)
    _, fin = mdn_chunkwise_forward(x, 16)
    _, ref = mdn_recurrent_forward(x)
    assert max_rel_err(fin.S, ref.S) <= 1e-10


def test_vtilde_matches_recurrence(rng):
    x = random_inputs(rng, 1, 40, 1, 8)
    _, _, vt = mdn_chunkwise_forward(x, 16, return_vtilde=True)
    _, _, trace = mdn_recurrent_forward(x, record_states=True)
    p = x.resolved_p()
    ref = x.v[:, :, 0] - np.einsum("btk,btkv->btv", p[:, :, 0], trace[:, :-1, 0])
    np.testing.assert_allclose(vt[:, :, 0], ref, rtol=1e-10, atol=1e-12)


def test_rejects_mu_zero_and_bad_chunk(rng):
    x = random_inputs(rng, 1, 8, 1, 4)
    with pytest.raises(ValueError, match="mu"):
        mdn_chunkwise_forward(AttnInputs(x.q, x.k, x.v, override_gates(x.gates, mu=0.0)), 4)
    with pytest.raises(ValueError):
        mdn_chunkwise_forward(x, 3)
    with pytest.raises(ValueError):
        mdn_chunkwise_forward(x, 128)


def test_workers(rng):
    x = random_inputs(rng, 2, 70, 3, 8)
    o1, _ = mdn_chunkwise_forward(x, 32, workers=1)
    o3, _ = mdn_chunkwise_forward(x, 32, workers=3)
    np.testing.assert_array_equal(o1, o3)
