import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopdet.errors import DimensionError, DomainError
from coopdet.fusion import (
    ClassFusion,
    CrossAgentParams,
    GroupConfig,
    GroupParams,
    PathwayConfig,
    baseline_fuse,
    class_fusion,
    cross_agent_attention,
    fuse_groups,
    project_group_features,
)
from coopdet.gradcheck import grad_check
from coopdet.nn import Conv2d, make_rng
from coopdet.tensor import Tensor

D = 6
SMALL_CFG = GroupConfig(pathways={"small": PathwayConfig(2, 3, 1), "large": PathwayConfig(1, 4, 2)})


def _maps(n, h=4, w=5, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, D, h, w)))


def _attn(path=PathwayConfig(2, 3, 1), seed=0):
    return CrossAgentParams(D, path, make_rng(seed))


class TestProjection:
    def test_identity_and_zero(self):
        g = GroupParams(D, PathwayConfig(1, 2), make_rng(0))
        f = _maps(2)
        g.proj.weight.data[:] = np.eye(D)[:, :, None, None]
        g.proj.bias.data[:] = 0
        assert np.array_equal(project_group_features(f, g).numpy(), f.numpy())
        g.proj.weight.data[:] = 0
        out = project_group_features(f, g)
        assert out.shape == f.shape and not out.numpy().any()


class TestCrossAgent:
    def test_single_agent_is_value_projection(self):
        p = _attn()
        f = _maps(1)
        out, alpha = cross_agent_attention(f, 0, p)
        assert np.all(alpha.numpy() == 1.0)
        tok = f.numpy()[0].transpose(1, 2, 0)
        v = tok @ p.v.weight.data + p.v.bias.data
        expected = (v @ p.out.weight.data + p.out.bias.data).transpose(2, 0, 1)
        assert np.allclose(out.numpy(), expected, atol=1e-12)

    def test_identical_agents_uniform(self):
        f = _maps(1).numpy()
        out, alpha = cross_agent_attention(Tensor(np.repeat(f, 3, axis=0)), 1, _attn())
        assert np.allclose(alpha.numpy(), 1 / 3, atol=1e-15)

    def test_scalar_softmax_values(self):
        p = CrossAgentParams(1, PathwayConfig(1, 1), make_rng(0))
        p.q.weight.data[:] = 1.0
        p.q.bias.data[:] = 0.0
        p.k.weight.data[:] = 1.0
        maps = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1, 1))
        _, alpha = cross_agent_attention(maps, 0, p)
        assert alpha.numpy().ravel() == pytest.approx([0.7310585786, 0.2689414214], abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 1000), st.sampled_from([1, 2]))
    def test_weights_sum_to_one(self, n, ego, seed, down):
        ego = ego % n
        p = _attn(PathwayConfig(2, 3, down), seed)
        p.q.weight.data *= 10
        _, alpha = cross_agent_attention(_maps(n, 5, 3, seed), ego, p)
        a = alpha.numpy()
        assert np.all(a >= 0) and np.abs(a.sum(-1) - 1).max() < 1e-9

    def test_non_ego_permutation_invariant(self):
        p = _attn(PathwayConfig(2, 3, 2))
        f = _maps(4).numpy()
        a, _ = cross_agent_attention(Tensor(f), 0, p)
        b, _ = cross_agent_attention(Tensor(f[[0, 3, 1, 2]]), 0, p)
        assert np.allclose(a.numpy(), b.numpy(), atol=1e-12)

    def test_large_pathway_resolution(self):
        out, alpha = cross_agent_attention(_maps(2, 5, 7), 0, _attn(PathwayConfig(1, 2, 2)))
        assert out.shape == (D, 5, 7)
        assert alpha.shape == (3, 4, 1, 2)

    def test_agent_count_errors(self):
        with pytest.raises(DomainError):
            cross_agent_attention(Tensor(np.zeros((0, D, 2, 2))), 0, _attn())
        with pytest.raises(DomainError):
            cross_agent_attention(_maps(5), 0, _attn())
        with pytest.raises(DomainError):
            cross_agent_attention(_maps(2), 2, _attn())


class TestFuseGroups:
    def test_selects_small_group(self):
        conv = Conv2d(2 * D, D, 3, make_rng(0))
        conv.weight.data[:] = 0
        conv.weight.data[:, :D, 1, 1] = np.eye(D)
        conv.bias.data[:] = 0
        a, b = _maps(1, seed=1).numpy()[0], _maps(1, seed=2).numpy()[0]
        assert np.array_equal(fuse_groups([Tensor(a), Tensor(b)], conv).numpy(), a)

    def test_zero_inputs(self):
        conv = Conv2d(2 * D, D, 3, make_rng(0))
        z = Tensor(np.zeros((D, 3, 3)))
        assert not fuse_groups([z, z], conv).numpy().any()

    def test_full_width(self):
        conv = Conv2d(512, 256, 3, make_rng(0))
        x = Tensor(np.ones((256, 4, 3)))
        assert fuse_groups([x, x], conv).shape == (256, 4, 3)

    def test_linearity(self):
        conv = Conv2d(2 * D, D, 3, make_rng(1))
        conv.bias.data[:] = 0
        rng = np.random.default_rng(0)
        a = [Tensor(rng.normal(size=(D, 4, 4))) for _ in range(2)]
        b = [Tensor(rng.normal(size=(D, 4, 4))) for _ in range(2)]
        s = [Tensor(2.0 * x.numpy() - 3.0 * y.numpy()) for x, y in zip(a, b)]
        lhs = fuse_groups(s, conv).numpy()
        rhs = 2.0 * fuse_groups(a, conv).numpy() - 3.0 * fuse_groups(b, conv).numpy()
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch(self):
        conv = Conv2d(2 * D, D, 3, make_rng(0))
        with pytest.raises(DimensionError):
            fuse_groups([Tensor(np.zeros((D, 3, 3))), Tensor(np.zeros((D, 3, 4)))], conv)


class TestBaselines:
    def test_max_idempotent_and_dominance(self):
        f = _maps(1).numpy()[0]
        assert np.array_equal(baseline_fuse(Tensor(np.stack([f, f])), "max").numpy(), f)
        assert np.array_equal(baseline_fuse(Tensor(np.stack([f, f + 1])), "max").numpy(), f + 1)

    def test_avg_cancels(self):
        f = _maps(1).numpy()[0]
        assert np.array_equal(baseline_fuse(Tensor(np.stack([f, -f])), "avg").numpy(), np.zeros_like(f))

    def test_single_and_errors(self):
        assert baseline_fuse(_maps(3), "single", 0, _attn()).shape == (D, 4, 5)
        with pytest.raises(DomainError):
            baseline_fuse(_maps(2), "median")
        with pytest.raises(DomainError):
            baseline_fuse(_maps(2), "single")


def test_group_config_validation():
    with pytest.raises(DomainError):
        GroupConfig(groups={"small": ("pedestrian", "car"), "large": ("car", "truck")})
    assert GroupConfig().group_of("truck") == "large"


def test_single_agent_class_fusion_uses_only_ego():
    fusion = ClassFusion(D, SMALL_CFG, make_rng(2))
    f = _maps(2)
    solo = class_fusion(Tensor(f.numpy()[:1]), 0, fusion).numpy()
    assert solo.shape == (D, 4, 5)
    # changing a non-existent partner cannot matter; changing the ego does
    other = class_fusion(Tensor(f.numpy()[1:]), 0, fusion).numpy()
    assert not np.allclose(solo, other)


def test_class_fusion_gradients():
    fusion = ClassFusion(3, GroupConfig(pathways={"small": PathwayConfig(1, 2, 1), "large": PathwayConfig(2, 1, 2)}),
                         make_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 3, 3)), requires_grad=True)
    rep = grad_check(lambda: (class_fusion(x, 1, fusion) ** 2).sum(), {"x": x, **fusion.parameters()})
    assert rep.max_rel_error < 1e-5


def test_group_order_is_canonical():
    shuffled = GroupConfig(groups={"large": ("truck", "car"), "small": ("pedestrian",)},
                           pathways={"large": PathwayConfig(4, 64, 2), "small": PathwayConfig(8, 32, 1)})
    assert list(shuffled.groups) == ["small", "large"] == list(shuffled.pathways)
    assert ClassFusion(16, shuffled, make_rng(0)).names == ClassFusion(16, GroupConfig(), make_rng(0)).names
