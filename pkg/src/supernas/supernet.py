"""Desk-scale weight-sharing supernet.

Every tensor is allocated once at the maximal configuration.  A subnetwork
reads leading slices only (basic numpy slicing, so views, never copies):

* state tensors: ``A[:n, :n]``, ``Bw[:n, :E]``, ``Cw[:n, :]``
* content projection: ``Wx[:, :E]`` with ``E = ssd_expand * d_model``
* MLP hidden units: ``W1[:, :H]``, ``b1[:H]``, ``W2[:H, :]`` with ``H = mlp_ratio * d_model``
* depth: the first ``depth`` blocks of a stage; later blocks are identities.

Each block is a residual write/state/read recurrence followed by a residual
tanh MLP.  The last stage feeds one global self-attention block whose output
tokens are used both by the prediction head and for distillation.

Gradients come from hand-written reverse passes over this fixed graph; the
sequential state scan runs in :mod:`supernas.kernels`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigTooLarge, DivergenceError, ShapeError
from .search_space import ArchConfig, SearchSpace, toy_space

BLOCK_TENSORS = ("Wx", "Bw", "A", "Cw", "W1", "b1", "W2", "b2")

# tensors trained in adaptation mode when a dimension is unlocked
DIMENSION_TENSORS = {
    "d_state": ("A", "Bw", "Cw"),
    "ssd_expand": ("Wx", "Bw"),
    "mlp_ratio": ("W1", "b1", "W2", "b2"),
}


@dataclass(frozen=True)
class NetShape:
    space: SearchSpace = field(default_factory=toy_space)
    d_model: tuple = (16, 16, 16, 16)
    image_size: int = 16
    patch: int = 4
    token_dim: int = 32
    query_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "d_model", tuple(int(d) for d in self.d_model))
        if len(self.d_model) != self.space.num_stages:
            raise ValueError("d_model needs one entry per stage")
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        for d in self.d_model:
            for r in (*self.space.ssd_expand_candidates, *self.space.mlp_ratio_candidates):
                if abs(r * d - round(r * d)) > 1e-9 or round(r * d) < 1:
                    raise ValueError(f"expansion {r} x d_model {d} is not a positive integer")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_px(self) -> int:
        return self.patch * self.patch

    def widths(self, stage: int, ssd_expand: float, mlp_ratio: float) -> tuple[int, int]:
        d = self.d_model[stage]
        return int(round(ssd_expand * d)), int(round(mlp_ratio * d))

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(), "d_model": list(self.d_model), "image_size": self.image_size,
            "patch": self.patch, "token_dim": self.token_dim, "query_dim": self.query_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetShape":
        d = dict(d)
        d["space"] = SearchSpace.from_dict(d["space"])
        d["d_model"] = tuple(d["d_model"])
        return cls(**d)


def block_name(stage: int, block: int, tensor: str) -> str:
    return f"s{stage}.b{block}.{tensor}"


@dataclass
class SupernetParams:
    shape: NetShape
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "SupernetParams":
        return SupernetParams(self.shape, {k: v.copy() for k, v in self.tensors.items()})

    def snapshot(self) -> "SupernetParams":
        """Read-only copy used while evaluation runs (copy-on-freeze)."""
        snap = self.copy()
        for v in snap.tensors.values():
            v.flags.writeable = False
        return snap

    def equal(self, other: "SupernetParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def init_maximal(shape: NetShape, rng: np.random.Generator, scale: float = 1.0) -> SupernetParams:
    """Allocate every tensor at maximal size from a seeded scaled normal."""
    sp = shape.space
    n_max = sp.d_state_candidates[-1]
    T: dict[str, np.ndarray] = {}

    def normal(shape_, fan_in, gain=1.0):
        return rng.standard_normal(shape_) * (gain * scale / np.sqrt(fan_in))

    d0 = shape.d_model[0]
    T["embed.W"] = normal((shape.patch_px, d0), shape.patch_px)
    T["embed.b"] = np.zeros(d0)
    for s, d in enumerate(shape.d_model):
        if s > 0 and shape.d_model[s - 1] != d:
            T[f"trans{s}.W"] = normal((shape.d_model[s - 1], d), shape.d_model[s - 1])
        E, H = shape.widths(s, sp.ssd_expand_candidates[-1], sp.mlp_ratio_candidates[-1])
        for j in range(sp.max_depth_per_stage[s]):
            T[block_name(s, j, "Wx")] = normal((d, E), d)
            T[block_name(s, j, "Bw")] = normal((n_max, E), E)
            T[block_name(s, j, "A")] = normal((n_max, n_max), n_max, 0.5)
            T[block_name(s, j, "Cw")] = normal((n_max, d), n_max, 0.3)
            T[block_name(s, j, "W1")] = normal((d, H), d)
            T[block_name(s, j, "b1")] = np.zeros(H)
            T[block_name(s, j, "W2")] = normal((H, d), H, 0.3)
            T[block_name(s, j, "b2")] = np.zeros(d)
    dL = shape.d_model[-1]
    for k in ("Wq", "Wk", "Wv"):
        T[f"attn.{k}"] = normal((dL, dL), dL)
    T["attn.Wo"] = normal((dL, dL), dL, 0.3)
    T["head.W"] = normal((dL, shape.patch_px), dL, 0.5)
    T["head.b"] = np.zeros(shape.patch_px)
    T["cls.W"] = normal((dL,), dL)
    T["cls.b"] = np.zeros(1)
    T["proj.Q"] = normal((shape.n_tokens, shape.query_dim), 1.0)
    T["proj.Wk"] = normal((dL, shape.query_dim), dL)
    T["proj.Wv"] = normal((dL, shape.token_dim), dL)
    return SupernetParams(shape, T)


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


@dataclass
class BlockView:
    Wx: np.ndarray
    Bw: np.ndarray
    A: np.ndarray
    Cw: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class SliceView:
    cfg: ArchConfig
    stages: list  # per stage: list of BlockView for active blocks only


def check_config(shape: NetShape, cfg: ArchConfig) -> None:
    sp = shape.space
    if len(cfg.stages) != sp.num_stages:
        raise ConfigTooLarge(f"config has {len(cfg.stages)} stages, supernet has {sp.num_stages}")
    for s, st in enumerate(cfg.stages):
        if st.d_state > sp.d_state_candidates[-1] or st.d_state < 1:
            raise ConfigTooLarge(f"stage {s}: d_state {st.d_state} exceeds {sp.d_state_candidates[-1]}")
        if st.ssd_expand > sp.ssd_expand_candidates[-1] or st.mlp_ratio > sp.mlp_ratio_candidates[-1]:
            raise ConfigTooLarge(f"stage {s}: expansion exceeds maximal configuration")
        if not 1 <= st.depth <= sp.max_depth_per_stage[s]:
            raise ConfigTooLarge(f"stage {s}: depth {st.depth} exceeds {sp.max_depth_per_stage[s]}")


def slice_view(params: SupernetParams, cfg: ArchConfig) -> SliceView:
    shape = params.shape
    check_config(shape, cfg)
    T = params.tensors
    stages = []
    for s, st in enumerate(cfg.stages):
        n = st.d_state
        E, H = shape.widths(s, st.ssd_expand, st.mlp_ratio)
        blocks = []
        for j in range(st.depth):
            g = lambda k: T[block_name(s, j, k)]  # noqa: E731
            blocks.append(BlockView(
                Wx=g("Wx")[:, :E], Bw=g("Bw")[:n, :E], A=g("A")[:n, :n], Cw=g("Cw")[:n, :],
                W1=g("W1")[:, :H], b1=g("b1")[:H], W2=g("W2")[:H, :], b2=g("b2"),
            ))
        stages.append(blocks)
    return SliceView(cfg, stages)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    B, S, _ = x.shape
    g = S // patch
    return x.reshape(B, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(B, g * g, patch * patch)


def unpatchify(p: np.ndarray, patch: int) -> np.ndarray:
    B, P, _ = p.shape
    g = int(round(np.sqrt(P)))
    return p.reshape(B, g, g, patch, patch).transpose(0, 1, 3, 2, 4).reshape(B, g * patch, g * patch)


def _mm(a, b, counter):
    if counter is not None:
        counter[0] += (a.size // a.shape[-1]) * a.shape[-1] * b.shape[-1]
    return a @ b


def block_forward(u: np.ndarray, bv: BlockView, counter=None):
    """One residual state-space block followed by a residual MLP."""
    x = _mm(u, bv.Wx, counter)
    v = _mm(x, bv.Bw.T, counter)
    h = kernels.scan_forward(np.ascontiguousarray(v), np.ascontiguousarray(bv.A))
    if counter is not None:
        B, P, n = v.shape
        counter[0] += B * (P - 1) * n * n
    u1 = u + _mm(h, bv.Cw, counter)
    a = np.tanh(_mm(u1, bv.W1, counter) + bv.b1)
    u2 = u1 + _mm(a, bv.W2, counter) + bv.b2
    return u2, (u, x, h, u1, a)


def block_backward(g2: np.ndarray, bv: BlockView, cache, grads: dict, prefix: str):
    u, x, h, u1, a = cache
    n, E = bv.Bw.shape
    H = bv.W1.shape[1]
    D = u.shape[-1]
    g2f = g2.reshape(-1, D)
    grads[prefix + "W2"][:H] += a.reshape(-1, H).T @ g2f
    grads[prefix + "b2"] += g2f.sum(axis=0)
    dz = (g2 @ bv.W2.T) * (1.0 - a * a)
    dzf = dz.reshape(-1, H)
    grads[prefix + "W1"][:, :H] += u1.reshape(-1, D).T @ dzf
    grads[prefix + "b1"][:H] += dzf.sum(axis=0)
    g1 = g2 + dz @ bv.W1.T
    grads[prefix + "Cw"][:n] += h.reshape(-1, n).T @ g1.reshape(-1, D)
    dh = g1 @ bv.Cw.T
    dv, dA = kernels.scan_backward(np.ascontiguousarray(dh), h, np.ascontiguousarray(bv.A))
    grads[prefix + "A"][:n, :n] += dA
    grads[prefix + "Bw"][:n, :E] += dv.reshape(-1, n).T @ x.reshape(-1, E)
    dx = dv @ bv.Bw
    grads[prefix + "Wx"][:, :E] += u.reshape(-1, D).T @ dx.reshape(-1, E)
    return g1 + dx @ bv.Wx.T


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(u, T, counter=None):
    d = u.shape[-1]
    q = _mm(u, T["attn.Wq"], counter)
    k = _mm(u, T["attn.Wk"], counter)
    v = _mm(u, T["attn.Wv"], counter)
    if counter is not None:
        B, P, _ = u.shape
        counter[0] += 2 * B * P * P * d
    att = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
    z = att @ v
    out = u + _mm(z, T["attn.Wo"], counter)
    return out, (u, q, k, v, att, z)


def attention_backward(g, T, cache, grads):
    u, q, k, v, att, z = cache
    d = u.shape[-1]
    c = 1.0 / np.sqrt(d)
    grads["attn.Wo"] += z.reshape(-1, d).T @ g.reshape(-1, d)
    dz = g @ T["attn.Wo"].T
    datt = dz @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ dz
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * c
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    uf = u.reshape(-1, d)
    grads["attn.Wq"] += uf.T @ dq.reshape(-1, d)
    grads["attn.Wk"] += uf.T @ dk.reshape(-1, d)
    grads["attn.Wv"] += uf.T @ dv.reshape(-1, d)
    return g + dq @ T["attn.Wq"].T + dk @ T["attn.Wk"].T + dv @ T["attn.Wv"].T


@dataclass
class ForwardResult:
    stage_features: list
    tokens: np.ndarray
    prediction: np.ndarray
    logits: np.ndarray | None
    cache: dict = field(repr=False, default=None)


def forward(params: SupernetParams, cfg: ArchConfig, x: np.ndarray, *, logits: bool = False,
            counter=None, keep_cache: bool = True) -> ForwardResult:
    """Run subnetwork ``cfg`` on a batch of ``(B, S, S)`` input grids."""
    shape = params.shape
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (shape.image_size, shape.image_size):
        raise ShapeError(f"expected (B, {shape.image_size}, {shape.image_size}) input, got {x.shape}")
    view = slice_view(params, cfg)
    T = params.tensors
    patches = patchify(x, shape.patch)
    u = _mm(patches, T["embed.W"], counter) + T["embed.b"]
    caches = {"patches": patches, "blocks": [], "trans": {}}
    stage_features = []
    for s, blocks in enumerate(view.stages):
        if f"trans{s}.W" in T:
            caches["trans"][s] = u
            u = _mm(u, T[f"trans{s}.W"], counter)
        stage_cache = []
        for bv in blocks:
            u, c = block_forward(u, bv, counter)
            stage_cache.append(c if keep_cache else None)
        caches["blocks"].append(stage_cache)
        stage_features.append(u)
    tokens, caches["attn"] = attention_forward(u, T, counter)
    pred_patches = _mm(tokens, T["head.W"], counter) + T["head.b"]
    prediction = unpatchify(pred_patches, shape.patch)
    lg = None
    if logits:
        lg = tokens.mean(axis=1) @ T["cls.W"] + T["cls.b"][0]
    return ForwardResult(stage_features, tokens, prediction, lg,
                         {"view": view, **caches} if keep_cache else None)


def zero_grads(params: SupernetParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def backward(params: SupernetParams, out: ForwardResult, *, d_tokens=None, d_prediction=None,
             d_logits=None, grads: dict | None = None) -> dict:
    """Accumulate parameter gradients for the given output gradients."""
    shape = params.shape
    T = params.tensors
    grads = zero_grads(params) if grads is None else grads
    cache = out.cache
    view: SliceView = cache["view"]
    dL = shape.d_model[-1]
    g = np.zeros_like(out.tokens) if d_tokens is None else np.array(d_tokens, dtype=np.float64)
    if d_prediction is not None:
        dpp = patchify(np.asarray(d_prediction, dtype=np.float64), shape.patch)
        grads["head.W"] += out.tokens.reshape(-1, dL).T @ dpp.reshape(-1, shape.patch_px)
        grads["head.b"] += dpp.reshape(-1, shape.patch_px).sum(axis=0)
        g += dpp @ T["head.W"].T
    if d_logits is not None:
        dl = np.asarray(d_logits, dtype=np.float64)
        pooled = out.tokens.mean(axis=1)
        grads["cls.W"] += pooled.T @ dl
        grads["cls.b"] += dl.sum()
        g += (dl[:, None] * T["cls.W"][None, :])[:, None, :] / out.tokens.shape[1]
    g = attention_backward(g, T, cache["attn"], grads)
    for s in range(len(view.stages) - 1, -1, -1):
        for j in range(len(view.stages[s]) - 1, -1, -1):
            g = block_backward(g, view.stages[s][j], cache["blocks"][s][j], grads, f"s{s}.b{j}.")
        if s in cache["trans"]:
            u_in = cache["trans"][s]
            W = T[f"trans{s}.W"]
            grads[f"trans{s}.W"] += u_in.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1])
            g = g @ W.T
    pf = cache["patches"].reshape(-1, shape.patch_px)
    grads["embed.W"] += pf.T @ g.reshape(-1, g.shape[-1])
    grads["embed.b"] += g.reshape(-1, g.shape[-1]).sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# losses and optimisation
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    d_tokens: np.ndarray | None = None
    d_prediction: np.ndarray | None = None
    d_logits: np.ndarray | None = None
    param_grads: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)


class TaskLoss:
    """Plain MSE regression loss against ground truth."""

    needs_logits = False

    def __call__(self, params, out: ForwardResult, batch) -> LossResult:
        diff = out.prediction - batch.y
        loss = float(np.mean(diff * diff))
        return LossResult(loss, d_prediction=2.0 * diff / diff.size, components={"l_gt": loss})


class LogisticLoss:
    """Binary cross-entropy on the pooled-token classification head."""

    needs_logits = True

    def __call__(self, params, out: ForwardResult, batch) -> LossResult:
        z = out.logits
        y = batch.labels
        # log(1 + exp(-s z)) with s = 2y - 1, computed stably
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return LossResult(loss, d_logits=(p - y) / len(z), components={"l_cls": loss})


def value_and_grad(params: SupernetParams, cfg: ArchConfig, batch, loss_fn):
    out = forward(params, cfg, batch.x, logits=getattr(loss_fn, "needs_logits", False))
    res = loss_fn(params, out, batch)
    grads = backward(params, out, d_tokens=res.d_tokens, d_prediction=res.d_prediction, d_logits=res.d_logits)
    for k, v in res.param_grads.items():
        grads[k] += v
    return res, grads


def adapt_mask(params: SupernetParams, new_dims) -> dict:
    """Which tensors may change while newly unlocked dimensions adapt.

    Unlocking a searchable dimension trains the tensors that dimension
    slices.  Unlocking depth trains the non-block tensors (embedding,
    stage transitions, attention, heads, projection) that see the shorter
    paths' features.
    """
    mask = {}
    suffixes = set()
    for d in new_dims:
        suffixes.update(DIMENSION_TENSORS.get(d, ()))
    for name in params.tensors:
        if name.startswith("s") and ".b" in name:
            mask[name] = name.rsplit(".", 1)[1] in suffixes
        else:
            mask[name] = "depth" in new_dims
    return mask


def sgd_step(params: SupernetParams, cfg: ArchConfig, batch, loss_fn, lr: float, mask: dict | None = None,
             diagnostics: dict | None = None, clip_norm: float | None = None) -> LossResult:
    """One SGD step on the subnetwork's slices, returning all loss components.

    With ``clip_norm`` the update is rescaled so the global norm of the
    trainable gradients does not exceed it.
    """
    res, grads = value_and_grad(params, cfg, batch, loss_fn)
    if not np.isfinite(res.loss):
        snap = {"config": cfg.key(), "loss": res.loss, "components": res.components}
        snap.update(diagnostics or {})
        raise DivergenceError(f"non-finite loss {res.loss} for {cfg.key()}", snap)
    if lr == 0.0:
        return res
    names = [k for k in grads if mask is None or mask.get(k, False)]
    step = lr
    if clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in names)))
        if norm > clip_norm:
            step = lr * clip_norm / norm
    for name in names:
        params.tensors[name] -= step * grads[name]
    return res


def train_step(params: SupernetParams, cfg: ArchConfig, batch, loss_fn, lr: float, mask: dict | None = None) -> float:
    return sgd_step(params, cfg, batch, loss_fn, lr, mask).loss


def predict_error(params: SupernetParams, cfg: ArchConfig, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Mean squared prediction error of subnetwork ``cfg`` over a dataset."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = forward(params, cfg, x[i:i + batch_size], keep_cache=False)
        total += float(np.sum((out.prediction - y[i:i + batch_size]) ** 2))
    return total / y.size


def clone_params(params: SupernetParams) -> SupernetParams:
    return SupernetParams(params.shape, copy.deepcopy(params.tensors))
