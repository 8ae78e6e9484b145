import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dct2_definition
from supernas.distill import (
    LossWeights,
    TeacherModel,
    TokenGrid,
    dct2,
    dct_matrix,
    freq_loss,
    freq_loss_and_grad,
    high_pass_mask,
    idct2,
    project_forward,
    project_tokens,
    pseudo_loss,
    silog_loss,
    spatial_loss,
    suppress_dc,
    total_loss,
)
from supernas.errors import InvalidWeights, MissingShape, ShapeError
from supernas.task import make_micro_task


# -- DCT --------------------------------------------------------------------------


def test_dct_constant_is_dc_only():
    X = dct2(np.full((4, 4), 2.5))
    assert X[0, 0] == pytest.approx(4 * 2.5, abs=1e-12)
    rest = X.copy()
    rest[0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-12


@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (6, 6), (5, 8), (16, 16)])
def test_dct_matches_definition(h, w):
    x = np.random.default_rng(h * 31 + w).standard_normal((h, w))
    assert np.max(np.abs(dct2(x) - dct2_definition(x))) < 1e-10


def test_dct_round_trip_and_orthonormal():
    rng = np.random.default_rng(0)
    for n in (1, 3, 8, 16):
        D = dct_matrix(n)
        assert np.max(np.abs(D @ D.T - np.eye(n))) < 1e-12
    x = rng.standard_normal((8, 8))
    assert np.max(np.abs(idct2(dct2(x)) - x)) < 1e-12
    xb = rng.standard_normal((3, 2, 5, 7))
    assert np.max(np.abs(idct2(dct2(xb)) - xb)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(h=st.integers(1, 16), w=st.integers(1, 16), seed=st.integers(0, 2**31))
def test_parseval(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    assert abs(np.linalg.norm(dct2(x)) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)


def test_suppress_dc():
    X = dct2(np.full((4, 4), 3.0))
    assert np.max(np.abs(suppress_dc(X))) < 1e-12
    Y = np.random.default_rng(1).standard_normal((5, 5))
    Y[0, 0] = 0
    assert np.array_equal(suppress_dc(Y), Y)
    Z = np.random.default_rng(2).standard_normal((5, 5))
    S = suppress_dc(Z)
    diff = S != Z
    assert diff[0, 0] and diff.sum() == 1
    assert Z[0, 0] != 0  # input untouched


def test_high_pass_mask():
    m = high_pass_mask(4, 4, None)
    assert m[0, 0] == 0 and m.sum() == 15
    m = high_pass_mask(4, 4, 1.2)
    assert m[0, 1] == 0 and m[1, 1] == 1 and m[1, 0] == 0


# -- projection -------------------------------------------------------------------


def test_projection_identity_single_token():
    tok = np.array([[0.3, -1.2, 2.0]])
    out = project_tokens(TokenGrid(tok), np.ones((1, 3)), {"Wk": np.eye(3), "Wv": np.eye(3)})
    assert np.allclose(out.tokens, tok, atol=0, rtol=0)


def test_projection_shape_and_rows():
    rng = np.random.default_rng(3)
    S = rng.standard_normal((2, 11, 6))
    Q = rng.standard_normal((9, 4))
    out, cache = project_forward(S, Q, rng.standard_normal((6, 4)), rng.standard_normal((6, 5)))
    assert out.shape == (2, 9, 5)
    att = cache[3]
    assert np.max(np.abs(att.sum(axis=-1) - 1)) < 1e-12
    grid = project_tokens(S[0], Q, {"Wk": rng.standard_normal((6, 4)), "Wv": rng.standard_normal((6, 5))}, (3, 3))
    assert grid.shape == (9, 5) and (grid.h, grid.w) == (3, 3)


def test_projection_shape_error():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeError):
        project_forward(rng.standard_normal((1, 4, 6)), rng.standard_normal((2, 4)),
                        rng.standard_normal((5, 4)), rng.standard_normal((6, 3)))


# -- losses -----------------------------------------------------------------------


def test_spatial_loss():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((16, 8))
    assert spatial_loss(a, a) == 0
    assert spatial_loss(a + 2, a) == pytest.approx(4.0, abs=1e-12)
    b = rng.standard_normal((16, 8))
    oracle = sum((a[i, j] - b[i, j]) ** 2 for i in range(16) for j in range(8)) / (16 * 8)
    assert abs(spatial_loss(TokenGrid(a), TokenGrid(b)) - oracle) < 1e-12
    with pytest.raises(ShapeError):
        spatial_loss(a, b[:, :4])


def test_freq_loss_examples():
    rng = np.random.default_rng(6)
    a = TokenGrid(rng.standard_normal((16, 3)), 4, 4)
    assert freq_loss(a, a) == 0
    shifted = TokenGrid(a.tokens + np.array([1.0, -2.0, 5.0]), 4, 4)
    assert freq_loss(shifted, a) < 1e-12
    with pytest.raises(MissingShape):
        freq_loss(a.tokens, a.tokens)


def test_freq_loss_oracle():
    rng = np.random.default_rng(7)
    h, w, C = 3, 5, 4
    s, t = rng.standard_normal((h * w, C)), rng.standard_normal((h * w, C))
    total = 0.0
    for c in range(C):
        S = dct2_definition(s[:, c].reshape(h, w))
        T = dct2_definition(t[:, c].reshape(h, w))
        S[0, 0] = T[0, 0] = 0
        total += np.sum((S - T) ** 2)
    oracle = total / (h * w * C)
    assert abs(freq_loss(TokenGrid(s, h, w), TokenGrid(t, h, w)) - oracle) < 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 4))
def test_freq_loss_dc_shift_invariance(seed, h, w, c):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((h * w, c)), rng.standard_normal((h * w, c))
    base = freq_loss(TokenGrid(s, h, w), TokenGrid(t, h, w))
    shift = rng.standard_normal(c) * 10
    assert abs(freq_loss(TokenGrid(s + shift, h, w), TokenGrid(t, h, w)) - base) <= 1e-12
    assert abs(freq_loss(TokenGrid(s, h, w), TokenGrid(t - shift, h, w)) - base) <= 1e-12


def test_freq_loss_gradient():
    rng = np.random.default_rng(8)
    s, t = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
    _, g = freq_loss_and_grad(TokenGrid(s, 3, 4), TokenGrid(t, 3, 4))
    eps = 1e-6
    num = np.zeros_like(s)
    for idx in np.ndindex(*s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += eps
        sm[idx] -= eps
        num[idx] = (freq_loss(TokenGrid(sp, 3, 4), TokenGrid(t, 3, 4))
                    - freq_loss(TokenGrid(sm, 3, 4), TokenGrid(t, 3, 4))) / (2 * eps)
    assert np.max(np.abs(num - g)) < 1e-8


def test_pseudo_loss():
    rng = np.random.default_rng(9)
    p = rng.standard_normal((2, 8, 8))
    assert pseudo_loss(p, p) == 0
    assert pseudo_loss(p + 1, p) == pytest.approx(1.0, abs=1e-12)
    q = rng.standard_normal((2, 8, 8))
    assert abs(pseudo_loss(p, q) - np.sum((p - q) ** 2) / p.size) < 1e-12
    with pytest.raises(ShapeError):
        pseudo_loss(p, q[:1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = TokenGrid(rng.standard_normal((4, 3)), 2, 2), TokenGrid(rng.standard_normal((4, 3)), 2, 2)
    assert spatial_loss(a, b) >= 0 and freq_loss(a, b) >= 0 and pseudo_loss(a.tokens, b.tokens) >= 0
    assert total_loss(*rng.random(4), LossWeights(*rng.random(3))) >= 0


def test_silog():
    p = np.full((4, 4), 2.0)
    assert silog_loss(p, p) == pytest.approx(0.0, abs=1e-15)
    # a pure global scale is forgiven up to (1 - lam)
    d = np.log(3.0)
    assert silog_loss(3 * p, p) == pytest.approx(d * d * (1 - 0.85))
    assert silog_loss(3 * p, p, lam=1.0) == pytest.approx(0.0, abs=1e-12)


# -- total loss -------------------------------------------------------------------


def test_total_loss_identities():
    comps = (0.7, 1.9, 2.3, 4.1)
    assert total_loss(*comps, LossWeights(0.0, 0.0, 0.0)) == 0.7
    assert total_loss(*comps, LossWeights(1.0, 0.0, 0.0)) == 1.9
    assert total_loss(1, 2, 3, 4, LossWeights(0.5, 0.1, 0.2)) == pytest.approx(2.6, abs=1e-15)


@pytest.mark.parametrize("theta", [-0.1, 1.3, float("nan")])
def test_total_loss_rejects_theta(theta):
    with pytest.raises(InvalidWeights):
        LossWeights(theta)


def test_negative_alpha_rejected():
    with pytest.raises(InvalidWeights):
        LossWeights(0.5, -1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_total_loss_slopes(seed):
    rng = np.random.default_rng(seed)
    w = LossWeights(float(rng.random()), float(rng.random() * 3), float(rng.random() * 3))
    base = rng.random(4) * 5
    coef = (1 - w.theta, w.theta, w.alpha1, w.alpha2)
    h = 0.5
    for k in range(4):
        up, dn = base.copy(), base.copy()
        up[k] += h
        dn[k] -= h
        slope = (total_loss(*up, w) - total_loss(*dn, w)) / (2 * h)
        assert abs(slope - coef[k]) <= 1e-12


# -- teacher ------------------------------------------------------------------------


def test_teacher_frozen_and_deterministic(micro_shape):
    task = make_micro_task(micro_shape, 0, n_train=8, n_val=4)
    t = TeacherModel.from_task(task, seed=1)
    tok1, p1 = t(task.x_val)
    tok2, p2 = t(task.x_val)
    assert np.array_equal(tok1.tokens, tok2.tokens) and np.array_equal(p1, p2)
    assert tok1.shape == (4, micro_shape.n_tokens, micro_shape.token_dim)
    assert p1.shape == task.y_val.shape
    with pytest.raises(ValueError):
        t.W1[0, 0] = 1.0
    assert t.W1.shape[1] == 4 * max(micro_shape.d_model)
