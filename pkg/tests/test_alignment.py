import numpy as np
import pytest
import torch

from cnsg.alignment import FrameCentroids, NoSharedClassesError, nsca_loss
from oracles import finite_difference_check, leaf


def frame(rows, present):
    return FrameCentroids(torch.tensor(rows, dtype=torch.float32), torch.tensor(present))


class TestNscaLoss:
    def test_identical_centroids_zero(self):
        a = frame([[1.0, 2.0], [3.0, 4.0]], [True, True])
        b = frame([[1.0, 2.0], [3.0, 4.0]], [True, True])
        assert nsca_loss(a, b).item() == 0.0

    def test_single_shared_class_arithmetic(self):
        a = frame([[1.0, 2.0]], [True])
        b = frame([[0.0, 0.0]], [True])
        assert abs(nsca_loss(a, b).item() - 1.5) < 1e-7

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = frame(rng.normal(size=(3, 4)), [True, False, True])
        b = frame(rng.normal(size=(3, 4)), [True, True, True])
        assert torch.allclose(nsca_loss(a, b), nsca_loss(b, a))

    def test_only_shared_classes_enter(self):
        a = frame([[1.0], [100.0], [2.0]], [True, True, True])
        b = frame([[0.0], [0.0], [1.0]], [True, False, True])
        # class 1 absent in curr: loss = (|1-0| + |2-1|)/2
        assert abs(nsca_loss(a, b).item() - 1.0) < 1e-7

    def test_no_shared_classes_raises(self):
        a = frame([[1.0], [0.0]], [True, False])
        b = frame([[0.0], [1.0]], [False, True])
        with pytest.raises(NoSharedClassesError):
            nsca_loss(a, b)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        rows_a = rng.normal(size=(3, 5))
        rows_b = rng.normal(size=(3, 5))
        shift = rng.normal(size=(1, 5))
        present = [True, True, False]
        base = nsca_loss(frame(rows_a, present), frame(rows_b, present))
        moved = nsca_loss(frame(rows_a + shift, present), frame(rows_b + shift, present))
        assert torch.allclose(base, moved, atol=1e-6)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = rng.normal(size=(2, 3))
            b = rng.normal(size=(2, 3))
            loss = nsca_loss(frame(a, [True, True]), frame(b, [True, True])).item()
            assert loss >= 0.0
            assert (loss == 0.0) == bool(np.allclose(a, b))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        # keep entries away from the |.| kink at zero difference
        a = leaf(rng.normal(size=(3, 4)) + 3.0)
        b = leaf(rng.normal(size=(3, 4)) - 3.0)
        present = torch.tensor([True, False, True])

        def fn(x, y):
            return nsca_loss(FrameCentroids(x, present), FrameCentroids(y, present))

        finite_difference_check(fn, [a, b])


class TestFrameCentroids:
    def test_from_dict_layout(self):
        fc = FrameCentroids.from_dict({1: torch.tensor([2.0, 3.0])}, num_classes=3)
        assert fc.present.tolist() == [False, True, False]
        assert torch.equal(fc.centroids[1], torch.tensor([2.0, 3.0]))
        assert torch.equal(fc.centroids[0], torch.zeros(2))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            FrameCentroids(torch.zeros(3), torch.tensor([True, False, True]))
        with pytest.raises(ValueError):
            FrameCentroids(torch.zeros(2, 2), torch.tensor([True]))
