import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cnsg.core import BinaryMask, EmptyMaskError, FeatureMap
from cnsg.nonsalient import (
    CnsfNode,
    PrototypeBank,
    UninitializedClassError,
    assemble_cnsf,
    ema_update,
    nonsalient_centroid,
    nonsalient_mask,
)
from oracles import nonsalient_mask_oracle


class TestNonsalientMask:
    def test_alpha_zero_keeps_all_positive(self):
        cam = torch.tensor([[1.0, 2.0], [-1.0, 0.0]])
        mask = nonsalient_mask(cam, 0.0)
        assert mask.data.tolist() == [[True, True], [False, False]]

    def test_half_alpha_drops_top(self):
        cam = torch.tensor([[4.0, 3.0], [2.0, 1.0]])
        mask = nonsalient_mask(cam, 0.5)
        # J = 2 -> tau = 3: the single top pixel is filtered out
        assert mask.data.tolist() == [[False, True], [True, True]]

    def test_constant_positive_ties_retained(self):
        cam = torch.full((3, 3), 2.5)
        for alpha in (0.1, 0.5, 0.9, 1.0):
            assert nonsalient_mask(cam, alpha).count() == 9

    def test_no_positive_values_empty(self):
        cam = torch.tensor([[-1.0, 0.0], [-3.0, -0.5]])
        assert nonsalient_mask(cam, 0.3).count() == 0
        assert nonsalient_mask(cam, 0.0).count() == 0

    def test_alpha_bounds_checked(self):
        with pytest.raises(ValueError):
            nonsalient_mask(torch.ones(2, 2), -0.1)
        with pytest.raises(ValueError):
            nonsalient_mask(torch.ones(2, 2), 1.5)

    @settings(max_examples=120, deadline=None)
    @given(st.integers(0, 10**9), st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]))
    def test_matches_sort_oracle(self, seed, alpha):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        cam = rng.normal(size=(h, w))
        if rng.random() < 0.5:
            cam = np.round(cam, 1)  # force ties
        got = nonsalient_mask(torch.tensor(cam), alpha).data.numpy().astype(np.uint8)
        np.testing.assert_array_equal(got, nonsalient_mask_oracle(cam, alpha))

    def test_distinct_positive_cardinality(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            cam = rng.permutation(np.arange(1, h * w + 1, dtype=np.float64))
            sign = rng.integers(0, 2, size=h * w).astype(bool)
            cam[sign] *= -1  # distinct values, mixed sign
            cam = cam.reshape(h, w)
            alpha = float(rng.uniform(0.05, 1.0))
            j = max(1, int(np.floor(h * w * alpha)))
            positives = int((cam > 0).sum())
            got = nonsalient_mask(torch.tensor(cam), alpha).count()
            assert got == positives - min(positives, j - 1)


class TestNonsalientCentroid:
    def test_reduces_to_class_centroid(self):
        fmap = FeatureMap(torch.randn(3, 4, 4))
        class_mask = BinaryMask(torch.tensor(np.random.default_rng(0).integers(0, 2, size=(4, 4))) | torch.eye(4, dtype=torch.long))
        full = BinaryMask(torch.ones(4, 4))
        got = nonsalient_centroid(fmap, class_mask, full)
        from cnsg.cam import class_centroid

        assert torch.allclose(got, class_centroid(fmap, class_mask))

    def test_singleton_intersection(self):
        fmap = FeatureMap(torch.arange(8, dtype=torch.float32).reshape(2, 2, 2))
        class_mask = BinaryMask(torch.tensor([[1, 1], [0, 0]]))
        ns_mask = BinaryMask(torch.tensor([[0, 1], [1, 0]]))
        got = nonsalient_centroid(fmap, class_mask, ns_mask)
        assert torch.allclose(got, fmap.data[:, 0, 1])

    def test_empty_intersection_raises(self):
        fmap = FeatureMap(torch.ones(1, 2, 2))
        with pytest.raises(EmptyMaskError):
            nonsalient_centroid(fmap, BinaryMask(torch.tensor([[1, 0], [0, 0]])), BinaryMask(torch.tensor([[0, 1], [1, 1]])))


class TestEmaUpdate:
    def test_first_observation_copies(self):
        bank = PrototypeBank(3, 2)
        ema_update(bank, 1, torch.tensor([3.0, -1.0]))
        assert torch.allclose(bank.prototypes[1], torch.tensor([3.0, -1.0]))
        assert bank.initialized.tolist() == [False, True, False]
        assert torch.equal(bank.prototypes[0], torch.zeros(2))

    def test_blend_arithmetic(self):
        bank = PrototypeBank(1, 2, ema_lambda=0.9)
        ema_update(bank, 0, torch.tensor([1.0, 1.0]))
        ema_update(bank, 0, torch.tensor([2.0, 0.0]))
        assert torch.allclose(bank.prototypes[0], torch.tensor([1.1, 0.9]), atol=1e-7)

    def test_fixed_point(self):
        bank = PrototypeBank(1, 3)
        v = torch.tensor([0.5, -2.0, 7.0])
        ema_update(bank, 0, v)
        ema_update(bank, 0, v.clone())
        assert torch.allclose(bank.prototypes[0], v)

    def test_detached_from_gradients(self):
        bank = PrototypeBank(1, 2)
        p = torch.tensor([1.0, 2.0], requires_grad=True)
        ema_update(bank, 0, p)
        assert not bank.prototypes.requires_grad

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**9))
    def test_convex_hull_bound(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 5))
        lam = float(rng.uniform(0.0, 1.0))
        bank = PrototypeBank(1, k, ema_lambda=lam)
        observations = rng.normal(size=(int(rng.integers(1, 12)), k))
        for obs in observations:
            ema_update(bank, 0, torch.tensor(obs, dtype=torch.float32))
        lo = observations.min(axis=0) - 1e-5
        hi = observations.max(axis=0) + 1e-5
        row = bank.prototypes[0].numpy()
        assert np.all(row >= lo) and np.all(row <= hi)

    def test_rejects_nonfinite(self):
        bank = PrototypeBank(1, 2)
        with pytest.raises(ValueError):
            ema_update(bank, 0, torch.tensor([1.0, float("nan")]))


class TestAssembleCnsf:
    def test_concatenation_layout(self):
        bank = PrototypeBank(1, 2)
        ema_update(bank, 0, torch.tensor([5.0, 6.0]))
        node = assemble_cnsf(bank, 0, torch.tensor([[0.0, 1.0]]))
        assert torch.allclose(node.data, torch.tensor([5.0, 6.0, 0.0, 1.0]))

    def test_zero_cam_pads_with_zeros(self):
        bank = PrototypeBank(1, 2)
        ema_update(bank, 0, torch.tensor([5.0, 6.0]))
        node = assemble_cnsf(bank, 0, torch.zeros(2, 3))
        assert torch.allclose(node.data, torch.tensor([5.0, 6.0] + [0.0] * 6))

    def test_minmax_normalization(self):
        bank = PrototypeBank(1, 1)
        ema_update(bank, 0, torch.tensor([9.0]))
        node = assemble_cnsf(bank, 0, torch.tensor([[2.0, 4.0]]))
        assert torch.allclose(node.data, torch.tensor([9.0, 0.0, 1.0]))

    def test_negative_pixels_zeroed(self):
        bank = PrototypeBank(1, 1)
        ema_update(bank, 0, torch.tensor([0.0]))
        node = assemble_cnsf(bank, 0, torch.tensor([[-5.0, 1.0, 3.0]]))
        assert torch.allclose(node.data, torch.tensor([0.0, 0.0, 0.0, 1.0]))

    def test_uninitialized_class_raises(self):
        bank = PrototypeBank(2, 2)
        ema_update(bank, 0, torch.ones(2))
        with pytest.raises(UninitializedClassError):
            assemble_cnsf(bank, 1, torch.ones(2, 2))

    def test_length_constant_across_classes(self):
        bank = PrototypeBank(3, 4)
        for n in range(3):
            ema_update(bank, n, torch.randn(4))
        lengths = {assemble_cnsf(bank, n, torch.randn(3, 4)).data.numel() for n in range(3)}
        assert lengths == {4 + 12}

    def test_node_requires_vector(self):
        with pytest.raises(ValueError):
            CnsfNode(torch.zeros(2, 2))
