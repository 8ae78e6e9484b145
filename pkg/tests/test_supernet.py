import numpy as np
import pytest

from gradcheck import max_relative_error
from supernas.errors import ConfigTooLarge, DivergenceError, ShapeError
from supernas.schedule import (
    active_sets,
    build_schedule,
    flat_schedule,
    full_sets,
    maximal_sets,
    sample_uniform,
    sampling_sets,
)
from supernas.search_space import ArchConfig, SearchSpace, StageConfig, decode, random_genotype, toy_space
from supernas.supernet import (
    LossResult,
    NetShape,
    TaskLoss,
    adapt_mask,
    block_forward,
    block_name,
    forward,
    init_maximal,
    patchify,
    sgd_step,
    slice_view,
    train_step,
    unpatchify,
    value_and_grad,
)
from supernas.task import Batch, make_micro_task


def rand_cfg(space, rng):
    return decode(random_genotype(space, rng))


def test_init_shapes(toy_params, toy_shape):
    T = toy_params.tensors
    assert T["s0.b0.A"].shape == (8, 8)
    assert T["s2.b3.Wx"].shape == (8, 32)
    assert T["s1.b1.W1"].shape == (8, 32)
    assert "s2.b4.A" not in T
    assert all(np.isfinite(v).all() for v in T.values())


def test_init_deterministic(toy_shape):
    a = init_maximal(toy_shape, np.random.default_rng(5))
    b = init_maximal(toy_shape, np.random.default_rng(5))
    assert a.equal(b)
    assert not a.equal(init_maximal(toy_shape, np.random.default_rng(6)))


def test_init_statistics():
    shape = NetShape(space=toy_space(), d_model=(16, 16, 16, 16))
    p = init_maximal(shape, np.random.default_rng(1))
    for name, v in p.tensors.items():
        if v.std() == 0:
            continue
        assert abs(v.mean()) < 4 * v.std() / np.sqrt(v.size), name


# -- slicing --------------------------------------------------------------------


def test_slice_maximal_covers_all(toy_params, toy_shape):
    view = slice_view(toy_params, toy_shape.space.maximal())
    bv = view.stages[0][0]
    for k in ("Wx", "Bw", "A", "Cw", "W1", "b1", "W2", "b2"):
        full = toy_params[block_name(0, 0, k)]
        assert getattr(bv, k).shape == full.shape
        assert np.shares_memory(getattr(bv, k), full)


def test_slice_is_leading_block(toy_params):
    cfg = ArchConfig(tuple(StageConfig(4, 1.0, 2.0, 2) for _ in range(4)))
    bv = slice_view(toy_params, cfg).stages[1][1]
    A = toy_params["s1.b1.A"]
    assert np.array_equal(bv.A, A[0:4, 0:4])
    assert np.array_equal(bv.Bw, toy_params["s1.b1.Bw"][:4, :8])
    assert np.array_equal(bv.Wx, toy_params["s1.b1.Wx"][:, :8])
    assert np.array_equal(bv.W1, toy_params["s1.b1.W1"][:, :16])
    assert np.array_equal(bv.W2, toy_params["s1.b1.W2"][:16, :])


def test_slice_writes_through(toy_params):
    cfg = ArchConfig(tuple(StageConfig(4, 1.0, 2.0, 1) for _ in range(4)))
    before = toy_params["s0.b0.A"].copy()
    bv = slice_view(toy_params, cfg).stages[0][0]
    bv.A += 1.0
    after = toy_params["s0.b0.A"]
    assert np.array_equal(after[:4, :4], before[:4, :4] + 1.0)
    assert np.array_equal(after[4:, :], before[4:, :]) and np.array_equal(after[:, 4:], before[:, 4:])


def test_slicing_consistency_all_pairs(toy_params):
    sp = toy_params.shape.space
    rng = np.random.default_rng(3)
    for _ in range(30):
        parent, child = rand_cfg(sp, rng), rand_cfg(sp, rng)
        stages = []
        for a, b in zip(parent.stages, child.stages):
            stages.append(StageConfig(min(a.d_state, b.d_state), min(a.ssd_expand, b.ssd_expand),
                                      min(a.mlp_ratio, b.mlp_ratio), min(a.depth, b.depth)))
        child = ArchConfig(tuple(stages))
        pv, cv = slice_view(toy_params, parent), slice_view(toy_params, child)
        for s in range(sp.num_stages):
            for j in range(child.stages[s].depth):
                for k in ("Wx", "Bw", "A", "Cw", "W1", "b1", "W2", "b2"):
                    c = getattr(cv.stages[s][j], k)
                    p = getattr(pv.stages[s][j], k)
                    assert np.array_equal(c, p[tuple(slice(0, n) for n in c.shape)])


def test_slice_rejects_too_large(toy_params):
    big = ArchConfig(tuple(StageConfig(16, 1.0, 1.0, 1) for _ in range(4)))
    with pytest.raises(ConfigTooLarge):
        slice_view(toy_params, big)
    deep = ArchConfig(tuple(StageConfig(8, 1.0, 1.0, 3) for _ in range(4)))
    with pytest.raises(ConfigTooLarge):
        slice_view(toy_params, deep)
    with pytest.raises(ConfigTooLarge):
        slice_view(toy_params, ArchConfig(deep.stages[:2]))


# -- forward --------------------------------------------------------------------


def test_patchify_round_trip():
    x = np.random.default_rng(0).standard_normal((3, 8, 8))
    assert np.array_equal(unpatchify(patchify(x, 2), 2), x)
    assert np.array_equal(patchify(x, 2)[0, 0], x[0, :2, :2].ravel())


def test_forward_shapes(toy_params, toy_shape):
    x = np.random.default_rng(1).standard_normal((5, 8, 8))
    out = forward(toy_params, toy_shape.space.minimal(), x, logits=True)
    assert out.prediction.shape == (5, 8, 8)
    assert out.tokens.shape == (5, toy_shape.n_tokens, 8)
    assert len(out.stage_features) == 4 and out.logits.shape == (5,)
    with pytest.raises(ShapeError):
        forward(toy_params, toy_shape.space.minimal(), x[:, :4])


def test_zero_input_zero_prediction(toy_params, toy_shape):
    out = forward(toy_params, toy_shape.space.maximal(), np.zeros((2, 8, 8)))
    assert np.array_equal(out.prediction, np.zeros((2, 8, 8)))


def test_prefix_depth_equivalence(toy_params, toy_shape):
    """Depth-d forward equals running the first d blocks by hand, bitwise."""
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 8, 8))
    for _ in range(10):
        cfg = rand_cfg(toy_shape.space, rng)
        out = forward(toy_params, cfg, x)
        T = toy_params.tensors
        u = patchify(x, toy_shape.patch) @ T["embed.W"] + T["embed.b"]
        maxcfg = ArchConfig(tuple(StageConfig(s.d_state, s.ssd_expand, s.mlp_ratio, m)
                                  for s, m in zip(cfg.stages, toy_shape.space.max_depth_per_stage)))
        full_view = slice_view(toy_params, maxcfg)
        for s, st in enumerate(cfg.stages):
            for j in range(st.depth):
                u, _ = block_forward(u, full_view.stages[s][j])
            assert np.array_equal(u, out.stage_features[s])


def test_inactive_region_independence(toy_params, toy_shape):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 8, 8))
    for _ in range(10):
        cfg = rand_cfg(toy_shape.space, rng)
        ref = forward(toy_params, cfg, x).prediction
        p = toy_params.copy()
        for s, st in enumerate(cfg.stages):
            n = st.d_state
            E, H = toy_shape.widths(s, st.ssd_expand, st.mlp_ratio)
            for j in range(toy_shape.space.max_depth_per_stage[s]):
                T = {k: p[block_name(s, j, k)] for k in ("Wx", "Bw", "A", "Cw", "W1", "b1", "W2", "b2")}
                if j >= st.depth:
                    for v in T.values():
                        v += rng.standard_normal(v.shape)
                    continue
                T["A"][n:, :] += 1.0
                T["A"][:, n:] += 1.0
                T["Bw"][n:, :] += 1.0
                T["Bw"][:, E:] += 1.0
                T["Cw"][n:, :] += 1.0
                T["Wx"][:, E:] += 1.0
                T["W1"][:, H:] += 1.0
                T["b1"][H:] += 1.0
                T["W2"][H:, :] += 1.0
        assert np.array_equal(forward(p, cfg, x).prediction, ref)


# -- schedule ---------------------------------------------------------------------


def test_schedule_start_and_boundary():
    sp = toy_space()
    sch = build_schedule(sp, 5, 10, 20)
    st0 = active_sets(sch, 0)
    assert st0.phase == 0 and st0.mode == "joint" and st0.active == maximal_sets(sp)
    end0 = sch.phases[0].length
    st1 = active_sets(sch, end0)
    assert st1.phase == 1 and st1.mode == "adapt" and st1.new_dim == "d_state"
    assert active_sets(sch, end0 - 1).phase == 0
    assert active_sets(sch, end0 + 5).mode == "joint"
    assert active_sets(sch, sch.total + 100).mode == "final"
    assert active_sets(sch, sch.total - 1).mode == "final"
    with pytest.raises(ValueError):
        active_sets(sch, -1)


def test_schedule_unlock_order_and_monotone():
    sp = SearchSpace()
    sch = build_schedule(sp, 3, 7, 11)
    dims = [p.new_dim for p in sch.phases[1:]]
    firsts = [dims.index(d) for d in ("d_state", "mlp_ratio", "ssd_expand", "depth")]
    assert firsts == sorted(firsts)
    assert sch.phases[1].active.d_state == (48, 64)
    assert sch.phases[2].active.d_state == (16, 32, 48, 64)
    prev = None
    for it in range(sch.total + 1):
        cur = active_sets(sch, it).active
        if prev is not None:
            assert prev.issubset(cur)
        prev = cur
    assert prev == full_sets(sp)


def test_adapt_sampling_uses_new_values():
    sp = SearchSpace()
    sch = build_schedule(sp, 3, 7, 11)
    rng = np.random.default_rng(0)
    st = active_sets(sch, sch.phases[0].length)
    for _ in range(50):
        cfg = sample_uniform(sampling_sets(st), rng)
        assert all(s.d_state == 48 for s in cfg.stages)


def test_sample_uniform_phase0_and_final():
    sp = SearchSpace()
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert sample_uniform(maximal_sets(sp), rng) == sp.maximal()
    counts = np.zeros(4)
    n = 10_000
    from supernas.search_space import encode, validate
    for _ in range(n):
        cfg = sample_uniform(full_sets(sp), rng)
        counts[sp.d_state_candidates.index(cfg.stages[0].d_state)] += 1
        assert validate(encode(cfg, sp))
    assert np.all(np.abs(counts - n / 4) < 4 * np.sqrt(n * 0.25 * 0.75))


def test_flat_schedule():
    sp = toy_space()
    sch = flat_schedule(sp, 30)
    assert sch.total == 30 and active_sets(sch, 0).active == full_sets(sp)


def test_schedule_dict_round_trip():
    sch = build_schedule(SearchSpace(), 3, 7, 11)
    from supernas.schedule import ProgressiveSchedule
    assert ProgressiveSchedule.from_dict(sch.to_dict()) == sch


# -- training -------------------------------------------------------------------


def _batch(shape, seed=0, n=4):
    task = make_micro_task(shape, seed, n_train=16, n_val=4)
    return task, Batch(task.x_train[:n], task.y_train[:n])


def test_lr_zero_unchanged(toy_params, toy_shape):
    _, b = _batch(toy_shape)
    before = toy_params.copy()
    loss = train_step(toy_params, toy_shape.space.maximal(), b, TaskLoss(), 0.0)
    assert np.isfinite(loss) and toy_params.equal(before)


def test_quadratic_loss_analytic_gradient():
    """Loss = 0.5 * ||head.b||^2 through a custom loss: gradient equals head.b exactly."""
    shape = NetShape(space=SearchSpace((2,), (1.0,), (1.0,), (1,)), d_model=(4,), image_size=4, patch=2,
                     token_dim=3, query_dim=2)
    p = init_maximal(shape, np.random.default_rng(0))
    p.tensors["head.b"][:] = np.arange(4.0)

    class Quad:
        def __call__(self, params, out, batch):
            b = params["head.b"]
            return LossResult(0.5 * float(b @ b), param_grads={"head.b": b.copy()})

    _, g = value_and_grad(p, shape.space.maximal(), Batch(np.zeros((1, 4, 4))), Quad())
    assert np.max(np.abs(g["head.b"] - np.arange(4.0))) <= 1e-10 * 4
    assert all(not np.any(v) for k, v in g.items() if k != "head.b")


def test_task_loss_gradient_analytic():
    """With a single linear path from head.b, dL/dhead.b = mean residual per pixel slot."""
    shape = NetShape(space=SearchSpace((2,), (1.0,), (1.0,), (1,)), d_model=(4,), image_size=4, patch=2,
                     token_dim=3, query_dim=2)
    p = init_maximal(shape, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    b = Batch(rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4)))
    res, g = value_and_grad(p, shape.space.maximal(), b, TaskLoss())
    out = forward(p, shape.space.maximal(), b.x)
    d = patchify(2 * (out.prediction - b.y) / b.y.size, 2).reshape(-1, 4).sum(axis=0)
    assert np.max(np.abs(g["head.b"] - d)) <= 1e-10 * np.max(np.abs(d))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_finite_difference(seed):
    assert max_relative_error(seed) < 1e-4


def test_adapt_mode_isolation(toy_params, toy_shape):
    _, b = _batch(toy_shape)
    for dims in (["d_state"], ["mlp_ratio"], ["ssd_expand"], ["depth"]):
        p = toy_params.copy()
        before = p.copy()
        mask = adapt_mask(p, dims)
        sgd_step(p, toy_shape.space.maximal(), b, TaskLoss(), 0.1, mask)
        changed = {k for k in p.names() if not np.array_equal(p[k], before[k])}
        assert changed, dims
        for k in p.names():
            if not mask[k]:
                assert np.array_equal(p[k], before[k]), (dims, k)


def test_clipping_bounds_step(toy_params, toy_shape):
    _, b = _batch(toy_shape)
    cfg = toy_shape.space.maximal()
    p = toy_params.copy()
    _, g = value_and_grad(p, cfg, b, TaskLoss())
    norm = np.sqrt(sum(np.sum(v * v) for v in g.values()))
    before = p.copy()
    sgd_step(p, cfg, b, TaskLoss(), 1.0, clip_norm=norm / 10)
    moved = np.sqrt(sum(np.sum((p[k] - before[k]) ** 2) for k in p.names()))
    assert moved == pytest.approx(norm / 10, rel=1e-9)


def test_divergence_raises(toy_params, toy_shape):
    _, b = _batch(toy_shape)
    b.y[0, 0, 0] = np.inf
    with pytest.raises(DivergenceError) as info:
        sgd_step(toy_params, toy_shape.space.maximal(), b, TaskLoss(), 0.1, diagnostics={"iter": 3})
    assert info.value.snapshot["iter"] == 3


def test_task_split_disjoint(micro_shape):
    task = make_micro_task(micro_shape, 3, n_train=32, n_val=16)
    tr = {r.tobytes() for r in task.x_train}
    assert not any(r.tobytes() in tr for r in task.x_val)
    again = make_micro_task(micro_shape, 3, n_train=32, n_val=16)
    assert np.array_equal(task.y_val, again.y_val)
    assert abs(np.std(np.concatenate([task.y_train, task.y_val])) - 1) < 1e-9
