import numpy as np
import pytest

from lrcnn import tensor as T
from lrcnn.blocks import Backbone, BackboneConfig, BottleneckBlock, LscBlock, StageSpec
from lrcnn.tensor import Parameter, Tensor


class TestBottleneck:
    def test_paper_conv3_stage_shapes(self):
        rng = np.random.default_rng(0)
        blocks = [BottleneckBlock(rng, 256, 128, stride=2)]
        for _ in range(3):
            blocks.append(BottleneckBlock(rng, 512, 128, 1))
        h = Tensor(np.zeros((1, 256, 256, 256)))
        with T.no_grad():
            for blk in blocks:
                h = blk(h)
        assert h.shape == (1, 512, 128, 128)

    def test_residual_identity_without_projection(self):
        # zeroing the main path's final norm scale turns a stride-1
        # same-width block into relu(input)
        rng = np.random.default_rng(1)
        blk = BottleneckBlock(rng, 16, 4, stride=1)
        blk.norm3.scale = Parameter(np.zeros(16))
        assert blk.proj is None
        x = rng.standard_normal((2, 16, 5, 5))
        out = blk(Tensor(x))
        np.testing.assert_array_equal(out.data, np.maximum(x, 0.0))

    def test_residual_identity_with_identity_projection(self):
        from lrcnn.blocks import Conv2d, NormAffine

        rng = np.random.default_rng(2)
        blk = BottleneckBlock(rng, 8, 2, stride=1)  # in == out, no proj by default
        blk.norm3.scale = Parameter(np.zeros(8))
        blk.proj = Conv2d(rng, 8, 8, 1)
        blk.proj.weight = Parameter(np.eye(8).reshape(8, 8, 1, 1))
        blk.proj_norm = NormAffine(8)
        x = rng.standard_normal((1, 8, 4, 4))
        out = blk(Tensor(x))
        np.testing.assert_array_equal(out.data, np.maximum(x, 0.0))

    def test_channel_mismatch_rejected(self):
        blk = BottleneckBlock(np.random.default_rng(3), 8, 2)
        with pytest.raises(ValueError):
            blk(Tensor(np.zeros((1, 4, 4, 4))))

    def test_gradcheck_small_block(self):
        rng = np.random.default_rng(4)
        blk = BottleneckBlock(rng, 4, 2, stride=2)

        def fn(ts):
            return T.sum_all(blk(ts[0]))

        assert T.grad_check(fn, [rng.standard_normal((1, 4, 6, 6))]) < 1e-4

    def test_out_channels_are_four_times_mid(self):
        blk = BottleneckBlock(np.random.default_rng(5), 8, 4)
        assert blk.out_channels == 16
        out = blk(Tensor(np.zeros((1, 8, 4, 4))))
        assert out.shape[1] == 16


class TestLsc:
    def test_channel_compression_shape(self):
        rng = np.random.default_rng(6)
        blk = LscBlock(rng, in_ch=512, mid_ch=256, out_ch=147, kernel=15)
        with T.no_grad():
            out = blk(Tensor(np.zeros((1, 512, 16, 16))))
        assert out.shape == (1, 147, 16, 16)  # spatial dims preserved

    def test_zero_branches_give_zero(self):
        rng = np.random.default_rng(7)
        blk = LscBlock(rng, 8, 4, 12, kernel=5)
        for conv in (blk.a2, blk.b2):
            conv.weight = Parameter(np.zeros_like(conv.weight.data))
        out = blk(Tensor(np.random.default_rng(8).standard_normal((1, 8, 9, 9))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_explicit_two_branch_oracle(self):
        rng = np.random.default_rng(9)
        blk = LscBlock(rng, 8, 4, 12, kernel=5)
        x = rng.standard_normal((1, 8, 9, 9))
        out = blk(Tensor(x))
        xa = T.conv2d(Tensor(x), blk.a1.weight, None, (1, 1), (2, 0))
        xa = T.conv2d(xa, blk.a2.weight, None, (1, 1), (0, 2))
        xb = T.conv2d(Tensor(x), blk.b1.weight, None, (1, 1), (0, 2))
        xb = T.conv2d(xb, blk.b2.weight, None, (1, 1), (2, 0))
        ref = xa.data + xb.data
        assert np.abs(out.data - ref).max() < 1e-12

    def test_impulse_receptive_field(self):
        rng = np.random.default_rng(10)
        blk = LscBlock(rng, 4, 2, 6, kernel=15)
        size = 63
        x = np.zeros((1, 4, size, size))
        x[0, :, size // 2, size // 2] = 1.0
        with T.no_grad():
            out = blk(Tensor(x))
        nz = np.argwhere(np.abs(out.data[0]).sum(axis=0) > 0)
        radius = 14  # two stacked kernel-15 convs reach at most (2*15 - 1)^2
        assert nz[:, 0].min() >= size // 2 - radius and nz[:, 0].max() <= size // 2 + radius
        assert nz[:, 1].min() >= size // 2 - radius and nz[:, 1].max() <= size // 2 + radius

    def test_channel_mismatch_rejected(self):
        blk = LscBlock(np.random.default_rng(11), 8, 4, 12, 5)
        with pytest.raises(ValueError):
            blk(Tensor(np.zeros((1, 4, 6, 6))))

    def test_gradcheck(self):
        rng = np.random.default_rng(12)
        blk = LscBlock(rng, 4, 2, 6, kernel=3)
        fn = lambda ts: T.sum_all(blk(ts[0]))
        assert T.grad_check(fn, [rng.standard_normal((1, 4, 6, 6))]) < 1e-4


class TestBackbone:
    def test_toy_tap_resolutions_match(self):
        cfg = BackboneConfig.toy()
        model = Backbone(np.random.default_rng(13), cfg)
        with T.no_grad():
            taps = model(Tensor(np.zeros((1, 3, 64, 64))))
        assert taps["conv3_x"].shape[2:] == taps["conv4_x"].shape[2:]
        assert taps["conv3_x"].shape == (1, cfg.conv3_out, 8, 8)
        assert taps["conv4_x"].shape == (1, cfg.conv4_out, 8, 8)

    def test_total_stride_is_eight(self):
        assert BackboneConfig.toy().total_stride == 8
        assert BackboneConfig.paper().total_stride == 8

    def test_stage4_stride_must_be_one(self):
        with pytest.raises(ValueError, match="stride"):
            BackboneConfig(
                conv1_out=8,
                stage2=StageSpec(2, 1, 1),
                stage3=StageSpec(2, 1, 2),
                stage4=StageSpec(2, 1, 2),
                stage5=StageSpec(2, 1, 2),
            )

    def test_bad_stn_source_rejected(self):
        with pytest.raises(ValueError, match="stn_source"):
            BackboneConfig.toy(stn_source="conv5_x")

    def test_forward_independent_of_batch_composition(self):
        # normalization carries no batch statistics
        rng = np.random.default_rng(14)
        model = Backbone(rng, BackboneConfig.toy())
        a = rng.standard_normal((1, 3, 32, 32))
        b = rng.standard_normal((1, 3, 32, 32))
        with T.no_grad():
            solo = model(Tensor(a))["conv4_x"].data
            pair = model(Tensor(np.concatenate([a, b])))["conv4_x"].data
        np.testing.assert_array_equal(pair[0], solo[0])

    def test_parameters_named_and_deterministic(self):
        m1 = Backbone(np.random.default_rng(15), BackboneConfig.toy())
        m2 = Backbone(np.random.default_rng(15), BackboneConfig.toy())
        p1, p2 = m1.parameters(), m2.parameters()
        assert p1.keys() == p2.keys()
        for k in p1:
            np.testing.assert_array_equal(p1[k].data, p2[k].data)
