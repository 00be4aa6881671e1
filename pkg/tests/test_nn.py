import math

import numpy as np
import pytest

from oracles import attention_by_hand
from semlink import nn
from semlink import tensor as T
from semlink.tensor import Tensor


def scalar(t):
    w = np.cos(np.arange(t.size)).reshape(t.shape)
    return T.sum_(T.mul(t, Tensor(w)))


@pytest.fixture
def gen():
    return np.random.default_rng(7)


class TestGDN:
    def test_forward_matches_formula(self, gen):
        x = gen.standard_normal((2, 3, 3, 4))
        beta = gen.uniform(0.5, 1.5, 4)
        gamma = gen.uniform(0.0, 0.2, (4, 4))
        p = nn.GDNParams(Tensor(beta), Tensor(gamma))
        y = nn.gdn(Tensor(x), p).data
        ref = np.empty_like(x)
        for idx in np.ndindex(x.shape[:3]):
            v = x[idx]
            for i in range(4):
                ref[idx + (i,)] = v[i] / math.sqrt(beta[i] + sum(gamma[i, j] * v[j] ** 2 for j in range(4)))
        np.testing.assert_allclose(y, ref, rtol=1e-12)

    def test_inverse_multiplies(self, gen):
        x = Tensor(gen.standard_normal((1, 2, 2, 3)))
        p = nn.GDNParams.init(3, np.float64)
        fwd = nn.gdn(x, p).data
        inv = nn.gdn(x, p, inverse=True).data
        norm = np.sqrt(1.0 + 0.1 * x.data**2)
        np.testing.assert_allclose(fwd, x.data / norm)
        np.testing.assert_allclose(inv, x.data * norm)

    def test_negative_parameters_are_clamped(self):
        p = nn.GDNParams(Tensor(np.array([-1.0])), Tensor(np.array([[-5.0]])))
        y = nn.gdn(Tensor(np.array([[[[2.0]]]])), p).data
        assert y.item() == pytest.approx(2.0 / math.sqrt(nn.BETA_FLOOR))

    def test_lower_bound_gradient(self):
        x = Tensor(np.array([-1.0, -1.0, 2.0]), requires_grad=True)
        y = nn.lower_bound(x, 0.0)
        y.backward(np.array([1.0, -1.0, 1.0]))
        # below the floor, only a gradient that would raise the value passes
        np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])

    def test_grad_check(self, gen):
        x = Tensor(gen.standard_normal((1, 3, 3, 4)))
        p = nn.GDNParams.init(4, np.float64)
        p.gamma.data = p.gamma.data + 0.01
        for inverse in (False, True):
            r = T.grad_check(lambda a: scalar(nn.gdn(a, p, inverse)), [x], 1e-7, extra=[p.beta, p.gamma])
            assert r.passed, r


class TestRelativePosition:
    @pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (4, 4), (3, 5)])
    def test_index_enumeration(self, h, w):
        idx = nn.rel_pos_index(h, w)
        for q in range(h * w):
            for k in range(h * w):
                (r1, c1), (r2, c2) = divmod(q, w), divmod(k, w)
                assert idx[q, k] == (r1 - r2 + h - 1) * (2 * w - 1) + (c1 - c2 + w - 1)

    def test_lookup_from_2d_table(self, gen):
        table = gen.standard_normal((3, 5))  # h=2, w=3
        p = nn.rel_pos_lookup(table, 2, 3).data
        assert p.shape == (6, 6)
        assert p[0, 5] == table[0 - 1 + 1, 0 - 2 + 2]
        np.testing.assert_array_equal(np.diag(p), table[1, 2])

    def test_zero_initialised(self):
        assert not nn.RelPosTable(2, 2, 3).lookup().data.any()

    def test_table_size_checked(self):
        with pytest.raises(ValueError):
            nn.rel_pos_lookup(np.zeros(7), 2, 2)


class TestAttention:
    @pytest.mark.parametrize("scale", ["din", "dh"])
    def test_matches_hand_evaluation(self, gen, scale):
        h, w, heads, din, e = 2, 3, 2, 5, 4
        x = gen.standard_normal((h * w, din))
        wq, wk, wv = (gen.standard_normal((din, e)) for _ in range(3))
        wo = gen.standard_normal((e, e))
        table = gen.standard_normal((heads, (2 * h - 1) * (2 * w - 1)))
        pos = nn.rel_pos_lookup(table, h, w)
        out, attn = nn.mhsa(Tensor(x), *map(Tensor, (wq, wk, wv, wo)), pos, heads, scale)
        ref, ref_attn = attention_by_hand(x, wq, wk, wv, wo, table, h, w, heads, din if scale == "din" else e // heads)
        np.testing.assert_allclose(out.data, ref, rtol=1e-10)
        np.testing.assert_allclose(attn.data[0], ref_attn, rtol=1e-10)

    def test_rows_are_distributions(self, gen):
        x = Tensor(gen.standard_normal((3, 4, 8)))
        ws = [Tensor(gen.standard_normal((8, 8))) for _ in range(4)]
        _, attn = nn.mhsa(x, *ws, num_heads=4)
        assert attn.shape == (3, 4, 4, 4)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0)
        assert (attn.data >= 0).all()

    def test_head_config_invariant(self):
        with pytest.raises(ValueError):
            nn.ViTStageConfig(num_heads=3, dims_per_head=32, embed_dim=64)

    def test_grad_check(self, gen):
        with T.precision(np.float64):
            layer = nn.MHSA(8, nn.ViTStageConfig(2, 4, 2, 8), (2, 2), gen)
        layer.pos.table.data = gen.standard_normal(layer.pos.table.shape)
        x = Tensor(gen.standard_normal((2, 4, 8)))
        r = T.grad_check(lambda a: scalar(layer(a)), [x], 1e-7, extra=layer.parameters())
        assert r.passed, r


class TestBlocks:
    def test_vit_block_preserves_shape(self, gen):
        blk = nn.ViTBlock(nn.ViTStageConfig(2, 8, 2, 16), (2, 2), gen)
        x = Tensor(gen.standard_normal((3, 2, 2, 16)).astype(np.float32))
        assert nn.vit_block(x, blk).shape == x.shape

    def test_vit_block_grid_mismatch(self, gen):
        blk = nn.ViTBlock(nn.ViTStageConfig(2, 8, 2, 16), (2, 2), gen)
        with pytest.raises(ValueError):
            blk(Tensor(np.zeros((1, 3, 3, 16))))

    @pytest.mark.parametrize("resample,expect", [("down2", (1, 2, 2, 6)), ("up2", (1, 8, 8, 6)), ("none", (1, 4, 4, 6))])
    def test_conv_stage_shapes(self, gen, resample, expect):
        stage = nn.ConvStage(nn.ConvStageConfig(3, 2, 6, resample, use_gdn=True, depth=2), gen)
        assert stage(Tensor(np.ones((1, 4, 4, 2)))).shape == expect

    @pytest.mark.parametrize("resample,expect", [("down2", (1, 2, 2, 8)), ("up2", (1, 8, 8, 8))])
    def test_vit_stage_shapes(self, gen, resample, expect):
        stage = nn.ViTStage(4, nn.ViTStageConfig(2, 4, 2, 8), expect[1:3], gen, resample)
        assert stage(Tensor(np.ones((1, 4, 4, 4)))).shape == expect

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            nn.ConvStageConfig(4, 2, 2)

    def test_parameter_names_unique(self, gen):
        stage = nn.ViTStage(4, nn.ViTStageConfig(2, 4, 2, 8), (2, 2), gen, "down2", depth=2)
        names = [n for n, _ in stage.named_parameters()]
        assert len(names) == len(set(names))
        assert "blocks.1.attn.pos.table" in names

    def test_conv_cost(self, gen):
        conv = nn.Conv2d(3, 4, 8, gen, stride=2)
        flops, shape = conv.cost((8, 8, 4))
        assert shape == (4, 4, 8)
        assert flops == 2 * 16 * 9 * 4 * 8
