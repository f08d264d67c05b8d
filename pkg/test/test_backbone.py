#!/usr/bin/env python3
"""
Test suite for the graph backbone predictor.
"""

import logging
import math
import sys
import unittest
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from causal_vidqa.backbone import (
    AttentionPool,
    BackbonePredictor,
    BlockFusion,
    GCNLayer,
    GraphBuilder,
    lengths_to_mask,
)
from causal_vidqa.schema import EncodedQuestion, GraphState


def _set_linear(layer, weight, bias=None):
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(weight, dtype=layer.weight.dtype))
        if layer.bias is not None:
            layer.bias.copy_(torch.as_tensor(bias if bias is not None else 0.0, dtype=layer.bias.dtype).expand_as(layer.bias))


class TestGraph(unittest.TestCase):
    """Test cases for graph construction and propagation"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_zero_projections_uniform(self):
        """Test zero projections give a uniform row-normalized graph"""
        builder = GraphBuilder(3)
        for layer in (builder.mlp5, builder.mlp6):
            _set_linear(layer, torch.zeros(3, 3))
        adjacency = builder(torch.randn(1, 4, 3))
        torch.testing.assert_close(adjacency, torch.full((1, 4, 4), 0.25))

    def test_single_node(self):
        """Test one node gives [[1]]"""
        torch.manual_seed(0)
        adjacency = GraphBuilder(4)(torch.randn(2, 1, 4))
        torch.testing.assert_close(adjacency, torch.ones(2, 1, 1))

    def test_two_node_hand_computation(self):
        """Test x=[[1],[2]] with MLP5 = x and MLP6 = x + 1"""
        builder = GraphBuilder(1)
        _set_linear(builder.mlp5, [[1.0]], 0.0)
        _set_linear(builder.mlp6, [[1.0]], 1.0)
        adjacency = builder(torch.tensor([[[1.0], [2.0]]]))
        # [[2, 3], [4, 6]] symmetrized to [[2, 3.5], [3.5, 6]]
        expected = torch.tensor([[[2.0 / 5.5, 3.5 / 5.5], [3.5 / 9.5, 6.0 / 9.5]]])
        torch.testing.assert_close(adjacency, expected, atol=1e-6, rtol=0)

    def test_rows_sum_to_one(self):
        """Test normalized rows on random inputs, with and without masking"""
        torch.manual_seed(1)
        builder = GraphBuilder(8)
        nodes = torch.randn(3, 6, 8)
        torch.testing.assert_close(builder(nodes).sum(-1), torch.ones(3, 6), atol=1e-6, rtol=0)
        mask = torch.tensor([[True] * 4 + [False] * 2] * 3)
        masked = builder(nodes, mask)
        torch.testing.assert_close(masked[:, :4].sum(-1), torch.ones(3, 4), atol=1e-6, rtol=0)
        self.assertTrue(bool((masked[:, :, 4:] == 0).all()))
        self.assertTrue(bool(torch.isfinite(masked).all()))

    def test_gcn_identity_doubles(self):
        """Test identity adjacency and weights without activation double the nodes"""
        layer = GCNLayer(3, activation=False)
        _set_linear(layer.weight, torch.eye(3))
        nodes = torch.randn(2, 4, 3)
        torch.testing.assert_close(layer(nodes, torch.eye(4).expand(2, 4, 4)), 2 * nodes)

    def test_zero_layers_is_identity(self):
        """Test propagating through no layers returns the nodes"""
        predictor = BackbonePredictor(3, 4, 5)
        self.assertEqual(len(predictor.gcn_layers), 2)
        state = GraphState(nodes=torch.randn(1, 3, 4), adjacency=torch.full((1, 3, 3), 1 / 3))
        self.assertTrue(torch.equal(predictor.gcn_propagate(state, layers=0), state.nodes))

    def test_build_graph_concatenates(self):
        """Test node layout and validity mask"""
        predictor = BackbonePredictor(3, 4, 5)
        state = predictor.build_graph(torch.randn(2, 3, 4), torch.randn(2, 2, 4), torch.tensor([[True, True, False]] * 2))
        self.assertEqual(tuple(state.nodes.shape), (2, 5, 4))
        self.assertEqual(tuple(state.adjacency.shape), (2, 5, 5))
        self.assertEqual(state.node_mask[0].tolist(), [True, True, False, True, True])

    def test_lengths_to_mask(self):
        """Test the valid-step mask"""
        self.assertEqual(lengths_to_mask(torch.tensor([1, 3]), 3, 2).tolist(), [[True, False, False], [True, True, True]])
        self.assertTrue(bool(lengths_to_mask(None, 2, 2).all()))


class TestPoolingAndFusion(unittest.TestCase):
    """Test cases for attention pooling and bilinear fusion"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_single_node_pool(self):
        """Test pooling one node returns it"""
        nodes = torch.randn(2, 1, 4)
        torch.testing.assert_close(AttentionPool(4)(nodes), nodes[:, 0])

    def test_equal_scores_mean(self):
        """Test equal scores average the nodes"""
        pool = AttentionPool(2)
        _set_linear(pool.score, torch.zeros(1, 2), 0.0)
        nodes = torch.tensor([[[1.0, 2.0], [3.0, 6.0]]])
        torch.testing.assert_close(pool(nodes), torch.tensor([[2.0, 4.0]]))

    def test_weighted_pool(self):
        """Test scores (0, log 3) weight the nodes (0.25, 0.75)"""
        pool = AttentionPool(2)
        _set_linear(pool.score, [[1.0, 0.0]], 0.0)
        nodes = torch.tensor([[[0.0, 5.0], [math.log(3), 7.0]]])
        torch.testing.assert_close(pool(nodes), torch.tensor([[0.75 * math.log(3), 6.5]]))

    def test_masked_nodes_ignored(self):
        """Test masked nodes get no weight"""
        nodes = torch.tensor([[[1.0, 1.0], [100.0, 100.0]]])
        torch.testing.assert_close(AttentionPool(2)(nodes, torch.tensor([[True, False]])), nodes[:, 0])

    def test_scalar_bilinear(self):
        """Test rank 1 identity projections give a*b before the output projection"""
        fusion = BlockFusion(1, rank=1)
        _set_linear(fusion.proj_a, [[1.0]])
        _set_linear(fusion.proj_b, [[1.0]])
        self.assertAlmostEqual(float(fusion.bilinear(torch.tensor([2.0]), torch.tensor([3.0]))), 6.0)

    def test_zero_inputs_bias_only(self):
        """Test zero inputs leave only the output bias"""
        fusion = BlockFusion(4)
        torch.testing.assert_close(fusion(torch.zeros(2, 4), torch.zeros(2, 4)), fusion.proj_out.bias.expand(2, 4))

    def test_bilinearity(self):
        """Test the fused value is linear in each argument"""
        torch.manual_seed(2)
        fusion = BlockFusion(3, rank=2)
        a1, a2, b = torch.randn(3), torch.randn(3), torch.randn(3)
        torch.testing.assert_close(fusion.bilinear(2 * a1 + a2, b), 2 * fusion.bilinear(a1, b) + fusion.bilinear(a2, b))
        torch.testing.assert_close(fusion.bilinear(b, 3 * a1), 3 * fusion.bilinear(b, a1))


class TestBackbonePredictor(unittest.TestCase):
    """Test cases for the full predictor"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def setUp(self):
        torch.manual_seed(3)
        self.predictor = BackbonePredictor(3, 4, 5)
        self.question = EncodedQuestion(q_local=torch.randn(2, 2, 4), q_global=torch.randn(2, 4))

    def test_valid_distribution(self):
        """Test predictions are distributions over the answers"""
        pred = self.predictor.predict(torch.randn(2, 3, 3), self.question)
        self.assertEqual(tuple(pred.probs.shape), (2, 5))
        torch.testing.assert_close(pred.probs.sum(-1), torch.ones(2))

    def test_deterministic(self):
        """Test identical inputs give identical logits"""
        scene = torch.randn(2, 3, 3)
        self.assertTrue(torch.equal(self.predictor(scene, self.question).logits, self.predictor(scene, self.question).logits))

    def test_padding_rows_ignored(self):
        """Test rows past a scene's length do not change its prediction"""
        scene = torch.randn(2, 4, 3)
        altered = scene.clone()
        altered[0, 3] = 50.0
        lengths = torch.tensor([3, 4])
        before = self.predictor.predict(scene, self.question, lengths).logits
        after = self.predictor.predict(altered, self.question, lengths).logits
        torch.testing.assert_close(before, after)

    def test_gradient_matches_finite_differences(self):
        """Test end-to-end gradient on a 3-clip toy"""
        predictor = BackbonePredictor(2, 4, 3).double()
        question = EncodedQuestion(
            q_local=torch.randn(1, 2, 4, dtype=torch.float64), q_global=torch.randn(1, 4, dtype=torch.float64)
        )
        scene = torch.randn(1, 3, 2, dtype=torch.float64, requires_grad=True)
        self.assertTrue(
            torch.autograd.gradcheck(
                lambda s: predictor.predict(s, question).logits, (scene,), eps=1e-4, atol=1e-5, rtol=1e-3
            )
        )


if __name__ == "__main__":
    unittest.main()
