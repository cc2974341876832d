import numpy as np
import pytest

from lrcnn import tensor as T
from lrcnn.blocks import StageSpec
from lrcnn.stn_head import StnHead
from lrcnn.tensor import Tensor


def make_head(seed=0, conv5_in=8, conv5=StageSpec(4, 1, 2)):
    return StnHead(np.random.default_rng(seed), 3, 7, 3, conv5_in=conv5_in, conv5=conv5)


class TestLocalize:
    def test_shapes(self):
        head = make_head()
        theta = head.localize(Tensor(np.zeros((128, 3, 7, 7))))
        assert theta.shape == (128, 2, 3)

    def test_identity_at_init(self):
        head = make_head()
        rng = np.random.default_rng(1)
        theta = head.localize(Tensor(rng.standard_normal((5, 3, 7, 7))))
        expect = np.tile(np.array([[1.0, 0, 0], [0, 1, 0]]), (5, 1, 1))
        np.testing.assert_array_equal(theta.data, expect)

    def test_gradcheck_through_resampling_chain(self):
        head = make_head(seed=2, conv5_in=4)
        rng = np.random.default_rng(3)
        head.loc_fc2.weight.data = rng.normal(0, 0.02, (6, 64))

        def fn(ts):
            return T.sum_all(head.resample(ts[0], ts[1]))

        err = T.grad_check(fn, [rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((2, 4, 7, 7))])
        assert err < 1e-4

    def test_wrong_flatten_size_rejected(self):
        head = make_head()
        with pytest.raises(ValueError):
            head.localize(Tensor(np.zeros((4, 3, 5, 5))))


class TestResample:
    def test_shapes(self):
        head = make_head(conv5_in=16)
        f_ps = Tensor(np.zeros((128, 3, 7, 7)))
        f_st = Tensor(np.zeros((128, 16, 7, 7)))
        with T.no_grad():
            out = head.resample(f_ps, f_st)
        assert out.shape == (128, 16, 7, 7)

    def test_identity_init_passthrough_bit_exact(self):
        head = make_head(conv5_in=8)
        rng = np.random.default_rng(4)
        f_ps = rng.standard_normal((6, 3, 7, 7))
        f_st = rng.standard_normal((6, 8, 7, 7))
        out = head.resample(Tensor(f_ps), Tensor(f_st))
        assert np.array_equal(out.data, f_st)

    def test_translation_matches_grid_sample_oracle(self):
        from lrcnn.roi_ops import affine_grid, grid_sample

        head = make_head(conv5_in=1)
        # bias encodes a pure translation of one pixel (2/6 normalized for W=7)
        head.loc_fc2.bias.data = np.array([1.0, 0.0, 2.0 / 6.0, 0.0, 1.0, 0.0])
        rng = np.random.default_rng(5)
        f_ps = rng.standard_normal((1, 3, 7, 7))
        f_st = rng.standard_normal((1, 1, 7, 7))
        out = head.resample(Tensor(f_ps), Tensor(f_st))
        theta = np.array([[[1.0, 0.0, 2.0 / 6.0], [0.0, 1.0, 0.0]]])
        ref = grid_sample(Tensor(f_st), affine_grid(Tensor(theta), (1, 1, 7, 7)))
        np.testing.assert_array_equal(out.data, ref.data)
        # one-pixel x shift with zero padding on the trailing column
        np.testing.assert_allclose(out.data[0, 0, :, :-1], f_st[0, 0, :, 1:], atol=1e-12)
        np.testing.assert_allclose(out.data[0, 0, :, -1], 0.0, atol=1e-12)

    def test_mismatched_roi_counts_rejected(self):
        head = make_head()
        with pytest.raises(ValueError):
            head.resample(Tensor(np.zeros((2, 3, 7, 7))), Tensor(np.zeros((3, 8, 7, 7))))


class TestClassifyRegress:
    def test_shapes(self):
        head = make_head(conv5_in=8, conv5=StageSpec(4, 2, 2))
        with T.no_grad():
            probs, deltas = head.classify_regress(Tensor(np.zeros((128, 8, 7, 7))))
        assert probs.shape == (128, 3)
        assert deltas.shape == (128, 12)

    def test_zero_fc_weights_give_uniform_probs(self):
        head = make_head(conv5_in=8)
        head.fc_cls.weight.data = np.zeros_like(head.fc_cls.weight.data)
        head.fc_cls.bias.data = np.zeros_like(head.fc_cls.bias.data)
        probs, _ = head.classify_regress(Tensor(np.random.default_rng(6).standard_normal((4, 8, 7, 7))))
        np.testing.assert_allclose(probs.data, 1 / 3, rtol=0, atol=1e-12)

    def test_probs_rows_sum_to_one(self):
        head = make_head(conv5_in=8)
        rng = np.random.default_rng(7)
        head.fc_cls.weight.data = rng.normal(0, 0.5, head.fc_cls.weight.shape)
        probs, _ = head.classify_regress(Tensor(rng.standard_normal((16, 8, 7, 7))))
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_argmax_invariant_to_logit_shift(self):
        head = make_head(conv5_in=8)
        rng = np.random.default_rng(8)
        head.fc_cls.weight.data = rng.normal(0, 0.5, head.fc_cls.weight.shape)
        x = Tensor(rng.standard_normal((8, 8, 7, 7)))
        base = head.classify_regress(x)[0].data.argmax(axis=1)
        head.fc_cls.bias.data = head.fc_cls.bias.data + 7.3
        shifted = head.classify_regress(x)[0].data.argmax(axis=1)
        np.testing.assert_array_equal(base, shifted)

    def test_full_head_gradcheck(self):
        head = make_head(seed=9, conv5_in=4, conv5=StageSpec(2, 1, 2))
        rng = np.random.default_rng(10)
        head.loc_fc2.weight.data = rng.normal(0, 0.02, (6, 64))

        def fn(ts):
            probs, deltas, _ = head(ts[0], ts[1])
            return T.sum_all(T.add(T.sum_all(T.log(probs)), T.sum_all(T.mul(deltas, deltas))))

        err = T.grad_check(fn, [rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((2, 4, 7, 7))])
        assert err < 1e-4


class TestStnTransparency:
    def test_head_output_matches_direct_path_at_init(self):
        # with the identity transform, classifying the resampled feature is
        # exactly classifying the standard pooled feature
        head = make_head(conv5_in=8)
        rng = np.random.default_rng(11)
        f_ps = Tensor(rng.standard_normal((5, 3, 7, 7)))
        f_st = Tensor(rng.standard_normal((5, 8, 7, 7)))
        via_stn = head.classify_regress(head.resample(f_ps, f_st))
        direct = head.classify_regress(f_st)
        np.testing.assert_array_equal(via_stn[0].data, direct[0].data)
        np.testing.assert_array_equal(via_stn[1].data, direct[1].data)

    def test_fps_gradient_flows_once_theta_perturbed(self):
        head = make_head(conv5_in=4)
        rng = np.random.default_rng(12)
        head.loc_fc2.weight.data = rng.normal(0, 0.05, (6, 64))
        f_ps = Tensor(rng.standard_normal((2, 3, 7, 7)))
        f_st = Tensor(rng.standard_normal((2, 4, 7, 7)))
        out = head.resample(f_ps, f_st)
        T.backward(T.sum_all(T.mul(out, out)))
        assert f_ps.grad is not None
        assert np.abs(f_ps.grad).max() > 0
