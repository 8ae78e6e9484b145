"""Dual-domain distillation losses.

The student's final tokens are resampled onto the teacher's token grid with
a single cross-attention layer driven by learnable queries.  Alignment is
then measured twice: token MSE in the spatial domain, and MSE between 2-D
DCT spectra of every channel map after the DC coefficient is removed.  A
prediction-level consistency term and the ground-truth task loss complete
the objective

    L = (1 - theta) * L_gt + theta * L_pseudo + alpha1 * L_spat + alpha2 * L_freq
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidWeights, MissingShape, ShapeError
from .supernet import ForwardResult, LossResult, NetShape, unpatchify
from .task import Generator, MicroTask


# ---------------------------------------------------------------------------
# DCT
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix ``D`` with ``X = D @ x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    D.flags.writeable = False
    return D


def dct2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    h, w = X.shape[-2:]
    return dct_matrix(h).T @ X @ dct_matrix(w)


def suppress_dc(spectrum: np.ndarray) -> np.ndarray:
    out = np.array(spectrum, dtype=np.float64, copy=True)
    out[..., 0, 0] = 0.0
    return out


def high_pass_mask(h: int, w: int, radius: float | None) -> np.ndarray:
    """Spectral weight mask: DC removed, optionally everything below ``radius``."""
    m = np.ones((h, w))
    if radius is not None:
        ky, kx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        m[np.hypot(ky, kx) < radius] = 0.0
    m[0, 0] = 0.0
    return m


# ---------------------------------------------------------------------------
# token grids and projection
# ---------------------------------------------------------------------------


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (n, d) or (B, n, d)
    h: int | None = None
    w: int | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.h is not None and self.w is not None and self.h * self.w != self.tokens.shape[-2]:
            raise ShapeError(f"h*w={self.h * self.w} does not match {self.tokens.shape[-2]} tokens")

    @property
    def shape(self):
        return self.tokens.shape


def _tokens(t) -> np.ndarray:
    return t.tokens if isinstance(t, TokenGrid) else np.asarray(t, dtype=np.float64)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def project_forward(S: np.ndarray, Q: np.ndarray, Wk: np.ndarray, Wv: np.ndarray):
    """Cross-attention of learnable queries over student tokens.

    ``S`` is ``(B, P, d)``; returns ``(B, n_q, d_v)`` and a cache.
    """
    if S.shape[-1] != Wk.shape[0] or S.shape[-1] != Wv.shape[0] or Q.shape[1] != Wk.shape[1]:
        raise ShapeError(
            f"projection shapes do not fit: tokens {S.shape}, queries {Q.shape}, Wk {Wk.shape}, Wv {Wv.shape}"
        )
    c = 1.0 / np.sqrt(Q.shape[1])
    K = S @ Wk
    V = S @ Wv
    att = _softmax(np.einsum("qe,bpe->bqp", Q, K) * c)
    return att @ V, (S, K, V, att, c)


def project_backward(g: np.ndarray, Q, Wk, Wv, cache):
    S, K, V, att, c = cache
    d = S.shape[-1]
    dV = att.transpose(0, 2, 1) @ g
    datt = g @ V.transpose(0, 2, 1)
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * c
    dQ = np.einsum("bqp,bpe->qe", ds, K)
    dK = np.einsum("bqp,qe->bpe", ds, Q)
    Sf = S.reshape(-1, d)
    dWk = Sf.T @ dK.reshape(-1, Wk.shape[1])
    dWv = Sf.T @ dV.reshape(-1, Wv.shape[1])
    dS = dK @ Wk.T + dV @ Wv.T
    return dS, dQ, dWk, dWv


def project_tokens(student, queries: np.ndarray, proj_params: dict, teacher_hw=None) -> TokenGrid:
    """Resample student tokens onto the query grid (one query per teacher token)."""
    S = _tokens(student)
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    out, _ = project_forward(S, np.asarray(queries, dtype=np.float64), proj_params["Wk"], proj_params["Wv"])
    if squeeze:
        out = out[0]
    h, w = teacher_hw if teacher_hw is not None else (None, None)
    return TokenGrid(out, h, w)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    d = a - b
    return float(np.mean(d * d))


def spatial_loss(student_proj, teacher) -> float:
    return mse(_tokens(student_proj), _tokens(teacher))


def _grid_hw(*grids):
    for g in grids:
        if isinstance(g, TokenGrid) and g.h is not None and g.w is not None:
            return g.h, g.w
    raise MissingShape("frequency loss needs token grid shape (h, w)")


def _channel_maps(t: np.ndarray, h: int, w: int) -> np.ndarray:
    # (..., n, C) -> (..., C, h, w)
    lead = t.shape[:-2]
    C = t.shape[-1]
    return np.moveaxis(t.reshape(*lead, h, w, C), -1, -3)


def _from_channel_maps(m: np.ndarray) -> np.ndarray:
    lead = m.shape[:-3]
    C, h, w = m.shape[-3:]
    return np.moveaxis(m, -3, -1).reshape(*lead, h * w, C)


def freq_loss_and_grad(student_proj, teacher, radius: float | None = None):
    h, w = _grid_hw(teacher, student_proj)
    a, b = _tokens(student_proj), _tokens(teacher)
    _check_same(a, b)
    mask = high_pass_mask(h, w, radius)
    diff = mask * dct2(_channel_maps(a - b, h, w))
    n = diff.size
    loss = float(np.sum(diff * diff) / n)
    grad = _from_channel_maps(idct2(2.0 * mask * diff / n))
    return loss, grad


def freq_loss(student_proj, teacher, radius: float | None = None) -> float:
    return freq_loss_and_grad(student_proj, teacher, radius)[0]


def pseudo_loss(student_pred, teacher_pred) -> float:
    return mse(student_pred, teacher_pred)


def silog_loss(pred, target, lam: float = 0.85, eps: float = 1e-6) -> float:
    """Scale-invariant log loss for positive depth maps (Eigen et al. form)."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    d = np.log(np.maximum(pred, eps)) - np.log(np.maximum(target, eps))
    return float(np.mean(d * d) - lam * np.mean(d) ** 2)


@dataclass(frozen=True)
class LossWeights:
    theta: float = 0.5
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        validate_weights(self)


def validate_weights(w: LossWeights) -> None:
    if not (0.0 <= w.theta <= 1.0) or not np.isfinite(w.theta):
        raise InvalidWeights(f"theta must be in [0, 1], got {w.theta}")
    if w.alpha1 < 0 or w.alpha2 < 0:
        raise InvalidWeights("alpha1 and alpha2 must be nonnegative")


def total_loss(l_gt: float, l_pseudo: float, l_spat: float, l_freq: float, w: LossWeights) -> float:
    validate_weights(w)
    return (1.0 - w.theta) * l_gt + w.theta * l_pseudo + w.alpha1 * l_spat + w.alpha2 * l_freq


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


@dataclass
class TeacherModel:
    """Frozen wide network derived from the task generator.

    Hidden width is four times the student's widest stage.  Its prediction
    head is a perturbed copy of the generator's output layer, so it is a
    strong but imperfect source of pseudo-labels; its tokens are a fixed
    random projection of the hidden features.
    """

    generator: Generator
    W1: np.ndarray
    b1: np.ndarray
    W_tok: np.ndarray
    W_out: np.ndarray
    grid: int

    def __post_init__(self):
        for a in (self.W1, self.b1, self.W_tok, self.W_out):
            a.flags.writeable = False

    @classmethod
    def from_task(cls, task: MicroTask, seed: int = 0, noise: float = 0.15) -> "TeacherModel":
        shape: NetShape = task.shape
        gen = task.generator
        rng = np.random.default_rng([seed, 0x7EAC])
        hidden = gen.W1.shape[1]
        W1 = gen.W1 + noise * gen.W1.std() * rng.standard_normal(gen.W1.shape)
        b1 = gen.b1 + noise * 0.3 * rng.standard_normal(gen.b1.shape)
        W_out = gen.W2 + noise * gen.W2.std() * rng.standard_normal(gen.W2.shape)
        W_tok = rng.standard_normal((hidden, shape.token_dim)) / np.sqrt(hidden)
        return cls(gen, W1, b1, W_tok, W_out, shape.grid)

    def __call__(self, x: np.ndarray) -> tuple[TokenGrid, np.ndarray]:
        hid = self.generator.hidden(np.asarray(x, dtype=np.float64), self.W1, self.b1)
        tokens = TokenGrid(hid @ self.W_tok, self.grid, self.grid)
        pred = unpatchify(hid @ self.W_out, self.generator.patch)
        return tokens, pred


class DistillLoss:
    """Full dual-domain objective as a supernet training loss."""

    needs_logits = False

    def __init__(self, teacher: TeacherModel, weights: LossWeights = LossWeights(), radius: float | None = None):
        self.teacher = teacher
        self.weights = weights
        self.radius = radius

    def __call__(self, params, out: ForwardResult, batch) -> LossResult:
        T = params.tensors
        w = self.weights
        t_tokens, t_pred = self.teacher(batch.x)
        proj, pcache = project_forward(out.tokens, T["proj.Q"], T["proj.Wk"], T["proj.Wv"])
        grid = TokenGrid(proj, t_tokens.h, t_tokens.w)

        d_gt = out.prediction - batch.y
        d_ps = out.prediction - t_pred
        l_gt = float(np.mean(d_gt * d_gt))
        l_ps = float(np.mean(d_ps * d_ps))
        d_sp = proj - t_tokens.tokens
        l_sp = float(np.mean(d_sp * d_sp))
        l_fr, g_fr = freq_loss_and_grad(grid, t_tokens, self.radius)
        loss = total_loss(l_gt, l_ps, l_sp, l_fr, w)

        n_pred = d_gt.size
        d_pred = (2.0 / n_pred) * ((1.0 - w.theta) * d_gt + w.theta * d_ps)
        d_proj = w.alpha1 * 2.0 * d_sp / d_sp.size + w.alpha2 * g_fr
        dS, dQ, dWk, dWv = project_backward(d_proj, T["proj.Q"], T["proj.Wk"], T["proj.Wv"], pcache)
        comps = {"l_gt": l_gt, "l_pseudo": l_ps, "l_spat": l_sp, "l_freq": l_fr, "total": loss}
        return LossResult(loss, d_tokens=dS, d_prediction=d_pred,
                          param_grads={"proj.Q": dQ, "proj.Wk": dWk, "proj.Wv": dWv}, components=comps)
