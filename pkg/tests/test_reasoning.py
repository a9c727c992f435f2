import math

import numpy as np
import pytest
import torch

from cnsg.core import FeatureMap
from cnsg.reasoning import GraphReasoner
from oracles import finite_difference_check, leaf


def make_reasoner(n, d, k, d_r=None, seed=0):
    torch.manual_seed(seed)
    return GraphReasoner(n, d, k, d_r)


class TestAdjacency:
    def test_zero_parameters_zero_adjacency(self):
        r = make_reasoner(3, 5, 4)
        with torch.no_grad():
            r.adjacency_proj.weight.zero_()
        a = r.adjacency(torch.randn(3, 5))
        assert torch.equal(a, torch.zeros(3, 3))

    def test_single_node_shape(self):
        r = make_reasoner(1, 4, 2)
        assert r.adjacency(torch.randn(1, 4)).shape == (1, 1)

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(4)
        nodes = rng.normal(size=(3, 6))
        proj = rng.normal(size=(3, 6))
        r = make_reasoner(3, 6, 4)
        with torch.no_grad():
            r.adjacency_proj.weight.copy_(torch.tensor(proj, dtype=torch.float32))
        got = r.adjacency(torch.tensor(nodes, dtype=torch.float32)).detach().numpy()
        want = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                want[i, j] = sum(nodes[i, d] * proj[j, d] for d in range(6))
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_wrong_shape_rejected(self):
        r = make_reasoner(2, 3, 2)
        with pytest.raises(ValueError):
            r.adjacency(torch.zeros(3, 3))


class TestGraphReason:
    def test_zero_adjacency_reduces_to_per_node_transform(self):
        r = make_reasoner(3, 4, 2, seed=1)
        with torch.no_grad():
            r.adjacency_proj.weight.zero_()
        nodes = torch.randn(3, 4)
        got = r.graph_reason(nodes)
        want = torch.relu(r.node_transform(nodes))
        assert torch.allclose(got, want)

    def test_zero_nodes_zero_output(self):
        r = make_reasoner(4, 5, 3, seed=2)
        out = r.graph_reason(torch.zeros(4, 5))
        assert torch.equal(out, torch.zeros(4, r.reasoned_dim))

    def test_hand_worked_two_node_example(self):
        r = make_reasoner(2, 1, 1, d_r=1)
        with torch.no_grad():
            r.node_transform.weight.copy_(torch.tensor([[1.0]]))
        nodes = torch.tensor([[1.0], [2.0]])
        a = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        out = r.graph_reason(nodes, adjacency=a)
        # (I - A) @ nodes = [[-1], [1]]; rectifier clips the negative entry
        assert torch.allclose(out, torch.tensor([[0.0], [1.0]]))

    def test_dense_oracle_with_injected_adjacency(self):
        rng = np.random.default_rng(5)
        n, d, d_r = 4, 5, 3
        nodes = rng.normal(size=(n, d))
        a = rng.normal(size=(n, n))
        w = rng.normal(size=(d_r, d))
        r = make_reasoner(n, d, 2, d_r=d_r)
        with torch.no_grad():
            r.node_transform.weight.copy_(torch.tensor(w, dtype=torch.float32))
        got = r.graph_reason(torch.tensor(nodes, dtype=torch.float32), adjacency=torch.tensor(a, dtype=torch.float32))
        smoothed = (np.eye(n) - a) @ nodes
        want = np.maximum(smoothed @ w.T, 0.0)
        np.testing.assert_allclose(got.detach().numpy(), want, rtol=1e-4, atol=1e-6)


class TestChannelGateRefine:
    def test_zero_logits_give_three_halves(self):
        r = make_reasoner(2, 3, 4, d_r=3)
        with torch.no_grad():
            r.gate_proj.weight.zero_()
            r.gate_proj.bias.zero_()
        f_o = FeatureMap(torch.randn(4, 2, 2))
        out = r.channel_gate_refine(f_o, torch.randn(2, 3))
        assert torch.allclose(out.data, 1.5 * f_o.data)

    def test_zero_feature_stays_zero(self):
        r = make_reasoner(2, 3, 4, d_r=3, seed=3)
        out = r.channel_gate_refine(FeatureMap(torch.zeros(4, 2, 2)), torch.randn(2, 3))
        assert torch.equal(out.data, torch.zeros(4, 2, 2))

    def test_log3_gate_multiplies_by_seven_fourths(self):
        r = make_reasoner(1, 2, 2, d_r=2)
        with torch.no_grad():
            r.gate_proj.weight.zero_()
            r.gate_proj.bias.copy_(torch.tensor([math.log(3.0), 0.0]))
        f_o = FeatureMap(torch.tensor([[[4.0]], [[4.0]]]))
        out = r.channel_gate_refine(f_o, torch.zeros(1, 2))
        assert torch.allclose(out.data[0], torch.tensor([[7.0]]), atol=1e-6)
        assert torch.allclose(out.data[1], torch.tensor([[6.0]]), atol=1e-6)

    def test_no_valid_nodes_uses_zero_aggregate(self):
        r = make_reasoner(3, 4, 2, d_r=4, seed=4)
        f_o = FeatureMap(torch.randn(2, 3, 3))
        valid = torch.zeros(3, dtype=torch.bool)
        got = r.channel_gate_refine(f_o, torch.randn(3, 4), valid)
        gate = torch.sigmoid(r.gate_proj(torch.zeros(4)))
        want = f_o.data * (1 + gate)[:, None, None]
        assert torch.allclose(got.data, want)

    def test_invalid_rows_excluded_from_mean(self):
        r = make_reasoner(3, 4, 2, d_r=4, seed=5)
        f_o = FeatureMap(torch.randn(2, 2, 2))
        reasoned = torch.randn(3, 4)
        valid = torch.tensor([True, False, True])
        got = r.channel_gate_refine(f_o, reasoned, valid)
        # oracle: mean over the two valid rows only
        agg = (reasoned[0] + reasoned[2]) / 2
        want = f_o.data * (1 + torch.sigmoid(r.gate_proj(agg)))[:, None, None]
        assert torch.allclose(got.data, want)

    def test_amplification_bound_and_sign(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            r = make_reasoner(3, 5, 4, seed=trial)
            f_o = torch.tensor(rng.normal(size=(4, 3, 3)), dtype=torch.float32)
            f_o[f_o.abs() < 1e-3] = 0.5
            out = r(FeatureMap(f_o), torch.tensor(rng.normal(size=(3, 5)), dtype=torch.float32))
            ratio = out.data / f_o
            assert bool((ratio > 1.0).all()) and bool((ratio < 2.0).all())
            assert torch.equal(out.data.sign(), f_o.sign())


class TestPermutationReduction:
    def test_zero_adjacency_path_is_permutation_invariant(self):
        r = make_reasoner(4, 6, 3, seed=7)
        with torch.no_grad():
            r.adjacency_proj.weight.zero_()
        nodes = torch.randn(4, 6)
        valid = torch.tensor([True, True, False, True])
        f_o = FeatureMap(torch.randn(3, 4, 4))
        base = r(f_o, nodes, valid)
        perm = torch.tensor([2, 0, 3, 1])
        permuted = r(f_o, nodes[perm], valid[perm])
        assert torch.allclose(base.data, permuted.data, atol=1e-6)


class TestGradients:
    def test_full_path_matches_finite_differences(self):
        n, d, k, d_r = 4, 10, 6, 5  # node_dim = k + 4 spatial? d arbitrary <= k + 12
        torch.manual_seed(8)
        r = GraphReasoner(n, d, k, d_r).double()
        rng = np.random.default_rng(9)
        f_o = leaf(rng.normal(size=(k, 3, 4)))
        nodes = leaf(rng.normal(size=(n, d)))
        valid = torch.tensor([True, False, True, True])

        def fn(f, nd, aw, tw, gw, gb):
            del aw, tw, gw, gb  # bound inside r; listed so FD perturbs them
            out = r(FeatureMap(f), nd, valid)
            return out.data.square().sum() + out.data.sum()

        params = [f_o, nodes, r.adjacency_proj.weight, r.node_transform.weight, r.gate_proj.weight, r.gate_proj.bias]
        finite_difference_check(fn, params, rtol=1e-4)
