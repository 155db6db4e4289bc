import numpy as np
import pytest

from kavan import tensor as tc
from kavan.attention import PROJ_DIM, AttentionParams, FeatureBlock, mask, pool, score, uniform_mask
from kavan.errors import ConfigurationError
from kavan.tensor import Tensor, backward

from fd import max_rel_error, numeric_grad

D, d = 6, 5


def params(seed=0, tier_context=False):
    return AttentionParams.init(np.random.default_rng(seed), D, d, tier_context=tier_context)


def block(seed=1):
    return FeatureBlock(Tensor(np.random.default_rng(seed).normal(size=(7, 7, D))))


def straight_line_scores(h, C, p, ctx=None):
    """Cell-by-cell evaluation of v . tanh(A_h h + A_H ctx + A_c c + b)."""
    out = []
    for c in C:
        pre = p.A_h.data @ h + p.A_c.data @ c + p.b.data
        if ctx is not None:
            pre = pre + p.A_H.data @ ctx
        out.append(float(p.v.data[0] @ np.tanh(pre)))
    return np.array(out)


def test_init_shapes_and_ranges():
    p = params(tier_context=True)
    assert p.v.shape == (1, PROJ_DIM) and p.A_h.shape == (PROJ_DIM, d) and p.A_c.shape == (PROJ_DIM, D)
    assert p.A_H.shape == (PROJ_DIM, d) and p.b.shape == (PROJ_DIM,)
    assert p.w_res.data.tolist() == [0.0]
    for _, t in p.named():
        assert t.requires_grad and np.all(np.abs(t.data) <= 0.1)


def test_zero_projection_gives_zero_scores():
    p = params()
    p.v.data = np.zeros_like(p.v.data)
    s = score(Tensor(np.ones(d)), block(), p)
    assert s.shape == (49,) and not s.data.any()


def test_identical_cells_score_identically():
    p = params()
    p.b.data = np.zeros(PROJ_DIM)
    cells = np.random.default_rng(2).normal(size=(7, 7, D))
    cells[4, 5] = cells[0, 1]
    s = score(Tensor(np.zeros(d)), FeatureBlock(Tensor(cells)), p).data
    assert s[0 * 7 + 1] == s[4 * 7 + 5]


@pytest.mark.parametrize("with_ctx", [False, True])
def test_score_matches_straight_line_oracle(with_ctx):
    rng = np.random.default_rng(3)
    p = params(tier_context=with_ctx)
    h, ctx = rng.normal(size=d), rng.normal(size=d)
    blk = block()
    got = score(Tensor(h), blk, p, Tensor(ctx) if with_ctx else None).data
    expected = straight_line_scores(h, blk.cells.data.reshape(49, D), p, ctx if with_ctx else None)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_batched_score_matches_single():
    rng = np.random.default_rng(4)
    p = params(tier_context=True)
    H, ctx, C = rng.normal(size=(3, d)), rng.normal(size=(3, d)), rng.normal(size=(3, 49, D))
    batched = score(Tensor(H), Tensor(C), p, Tensor(ctx)).data
    for i in range(3):
        single = score(Tensor(H[i]), Tensor(C[i]), p, Tensor(ctx[i])).data
        np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-13)


def test_context_without_A_H_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        score(Tensor(np.zeros(d)), block(), params(), tier_context=Tensor(np.zeros(d)))


def test_mask_properties():
    np.testing.assert_array_equal(mask(Tensor(np.zeros(49))).data, np.full(49, 1 / 49))
    s = np.random.default_rng(5).normal(size=49)
    a, b = mask(Tensor(s)).data, mask(Tensor(s + 7.5)).data
    assert np.max(np.abs(a - b)) < 1e-12 and abs(a.sum() - 1) < 1e-9
    spike = np.zeros(49)
    spike[10] = 20.0
    assert mask(Tensor(spike)).data[10] > 0.999


def test_pool_examples():
    blk = block()
    C = blk.cells.data.reshape(49, D)
    zero = Tensor([0.0])
    np.testing.assert_allclose(pool(blk, uniform_mask(), zero).data, C.mean(axis=0), rtol=1e-12)
    onehot = np.zeros(49)
    onehot[17] = 1.0
    np.testing.assert_array_equal(pool(blk, Tensor(onehot), zero).data, C[17])
    doubled = pool(blk, uniform_mask(), Tensor([1 / 49])).data
    np.testing.assert_allclose(doubled, 2 * C.mean(axis=0), rtol=1e-12)


def test_pool_is_linear_in_the_block():
    rng = np.random.default_rng(6)
    B1, B2 = rng.normal(size=(49, D)), rng.normal(size=(49, D))
    m = mask(Tensor(rng.normal(size=49)))
    w = Tensor([0.3])
    a, b = 1.7, -0.4
    lhs = pool(Tensor(a * B1 + b * B2), m, w).data
    rhs = a * pool(Tensor(B1), m, w).data + b * pool(Tensor(B2), m, w).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_gradients_through_score_mask_pool():
    rng = np.random.default_rng(7)
    p = params(tier_context=True)
    # larger weights than the init keep gradients above finite-difference roundoff
    for _, t in p.named():
        t.data = rng.uniform(-0.5, 0.5, t.shape)
    h, ctx, C = rng.normal(size=d), rng.normal(size=d), rng.normal(size=(49, D))
    probe = rng.normal(size=D)

    def loss_from(p, C):
        m = mask(score(Tensor(h), C, p, Tensor(ctx)))
        return tc.sum_(pool(C, m, p.w_res) * Tensor(probe))

    cells = Tensor(C, requires_grad=True)
    backward(loss_from(p, cells))
    for name, t in [*p.named(), ("cells", cells)]:
        base = t.data.copy()

        def f(v, t=t, base=base):
            t.data = v
            out = loss_from(p, Tensor(cells.data)).item()
            t.data = base
            return out

        assert max_rel_error(t.grad, numeric_grad(f, base), floor=1e-6) < 1e-4, name
