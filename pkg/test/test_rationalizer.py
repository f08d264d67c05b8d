#!/usr/bin/env python3
"""
Test suite for differentiable Top-K selection, spatio-temporal rationalization
and answer decoding.
"""

import itertools
import json
import logging
import math
import sys
import tempfile
import unittest
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from causal_vidqa.rationalizer import (
    AnswerDecoder,
    CrossAttention,
    MultiGrainReasoning,
    Rationalizer,
    TranSTRModel,
    adaptive_select,
    dump_rationales,
    hard_topk_mask,
    perturbed_topk,
    spatial_rationalize,
    temporal_rationalize,
)
from causal_vidqa.schema import AnswerMode, ConfigurationError


def _identity_attention(attention):
    with torch.no_grad():
        for layer in (attention.q_proj, attention.k_proj, attention.v_proj, attention.out_proj):
            layer.weight.copy_(torch.eye(layer.weight.shape[0]))
            layer.bias.zero_()


class TestTopK(unittest.TestCase):
    """Test cases for hard and perturbed Top-K"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_hard_topk(self):
        """Test [3, 1, 2] with K=2 selects the first and last entries"""
        self.assertEqual(hard_topk_mask(torch.tensor([3.0, 1.0, 2.0]), 2).tolist(), [1.0, 0.0, 1.0])

    def test_select_all(self):
        """Test K=n gives an all-ones mask"""
        mask = perturbed_topk(torch.randn(5), 5, sigma=2.0, samples=50, generator=torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(mask, torch.ones(5)))

    def test_small_sigma_matches_hard(self):
        """Test a tiny perturbation reduces to the hard Top-K"""
        mask = perturbed_topk(torch.tensor([3.0, 1.0, 2.0]), 2, sigma=1e-3, generator=torch.Generator().manual_seed(1))
        self.assertEqual(mask.tolist(), [1.0, 0.0, 1.0])

    def test_mask_range_and_sum(self):
        """Test entries lie in [0, 1] and sum to K"""
        generator = torch.Generator().manual_seed(2)
        mask = perturbed_topk(torch.randn(4, 8, generator=generator), 3, sigma=0.5, samples=500, generator=generator)
        self.assertTrue(bool(((mask >= 0) & (mask <= 1)).all()))
        torch.testing.assert_close(mask.sum(-1), torch.full((4,), 3.0), atol=0.05, rtol=0)

    def test_invalid_arguments(self):
        """Test K and sigma validation"""
        with self.assertRaises(ConfigurationError):
            perturbed_topk(torch.randn(3), 4)
        with self.assertRaises(ConfigurationError):
            perturbed_topk(torch.randn(3), 0)
        with self.assertRaises(ConfigurationError):
            perturbed_topk(torch.randn(3), 1, sigma=0.0)

    def test_monotone_in_score(self):
        """Test raising one score never lowers its mask value under common noise"""
        scores = torch.randn(10, 6, generator=torch.Generator().manual_seed(3))
        for i in range(6):
            raised = scores.clone()
            raised[:, i] += 0.3
            base = perturbed_topk(scores, 2, 0.5, 2000, torch.Generator().manual_seed(4))
            bumped = perturbed_topk(raised, 2, 0.5, 2000, torch.Generator().manual_seed(4))
            self.assertTrue(bool((bumped[:, i] >= base[:, i]).all()))

    def test_soft_and_hard_agree(self):
        """Test the top entries of the soft mask match the hard selection at sigma=0.05"""
        scores = torch.randn(1000, 6, generator=torch.Generator().manual_seed(5))
        soft = perturbed_topk(scores, 3, sigma=0.05, samples=1000, generator=torch.Generator().manual_seed(6))
        agree = (hard_topk_mask(soft, 3) == hard_topk_mask(scores, 3)).all(dim=-1).float().mean()
        self.assertGreaterEqual(float(agree), 0.99)

    def test_gradient_flows(self):
        """Test the perturbed estimator gives a finite, nonzero gradient"""
        scores = torch.randn(2, 5, requires_grad=True)
        mask = perturbed_topk(scores, 2, 0.5, 200, torch.Generator().manual_seed(7))
        (mask * torch.arange(5.0)).sum().backward()
        self.assertTrue(bool(torch.isfinite(scores.grad).all()))
        self.assertGreater(float(scores.grad.abs().sum()), 0.0)


class TestAdaptiveSelect(unittest.TestCase):
    """Test cases for interaction-based token selection"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def setUp(self):
        self.tokens = torch.arange(10.0).reshape(1, 5, 2)

    def test_single_question_token(self):
        """Test L=1 picks the top-K frames by score"""
        attn = torch.tensor([[[0.1], [0.5], [0.3], [0.9], [0.2]]])
        result = adaptive_select(self.tokens, attn, 3)
        self.assertEqual(result.indices.tolist(), [[1, 2, 3]])
        self.assertEqual(result.counts.tolist(), [3])
        torch.testing.assert_close(result.selected[0], self.tokens[0, [1, 2, 3]])
        self.assertEqual(result.weights.tolist(), [[0.0, 1.0, 1.0, 1.0, 0.0]])

    def test_repeated_frame_deduplicated(self):
        """Test interactions concentrated on one frame select a single token"""
        attn = torch.tensor([[[0.9, 0.8, 0.7], [0.1, 0.1, 0.1], [0.2, 0.1, 0.0]]])
        result = adaptive_select(self.tokens[:, :3], attn, 3)
        self.assertEqual(result.counts.tolist(), [1])
        self.assertEqual(result.indices.tolist(), [[0, -1, -1]])
        self.assertTrue(torch.equal(result.selected[0, 1:], torch.zeros(2, 2)))

    def test_matches_enumeration(self):
        """Test a 3x2 interaction map against brute-force ranking"""
        attn = torch.tensor([[[0.9, 0.85], [0.2, 0.1], [0.7, 0.3]]])
        interactions = [(float(attn[0, t, l]), t) for t, l in itertools.product(range(3), range(2))]
        top = sorted(interactions, reverse=True)[:3]
        expected = sorted({t for _, t in top})
        result = adaptive_select(self.tokens[:, :3], attn, 3)
        self.assertEqual(result.indices[0, : int(result.counts[0])].tolist(), expected)
        self.assertEqual(expected, [0, 2])

    def test_different_patterns_different_counts(self):
        """Test two frames under equal K select different object counts"""
        objects = torch.randn(2, 4, 2)
        attn = torch.tensor(
            [
                [[0.9, 0.8], [0.1, 0.0], [0.2, 0.1], [0.0, 0.1]],
                [[0.9, 0.1], [0.1, 0.8], [0.7, 0.0], [0.0, 0.1]],
            ]
        )
        result = adaptive_select(objects, attn, 3)
        self.assertEqual(result.counts.tolist(), [2, 3])
        self.assertTrue(bool((result.counts <= 3).all()))

    def test_single_object(self):
        """Test S=1 selects that object"""
        result = adaptive_select(torch.randn(1, 1, 2), torch.tensor([[[0.4]]]), 12)
        self.assertEqual(result.indices.tolist(), [[0]])

    def test_training_selection_differentiable(self):
        """Test perturbed selection passes gradient to the interaction map"""
        attn = torch.rand(2, 5, 2, requires_grad=True)
        result = adaptive_select(
            self.tokens.expand(2, 5, 2), attn, 3, training=True, samples=200, generator=torch.Generator().manual_seed(0)
        )
        result.selected.sum().backward()
        self.assertTrue(bool(torch.isfinite(attn.grad).all()))
        self.assertTrue(bool((result.counts <= 3).all()))


class TestRationalizerModules(unittest.TestCase):
    """Test cases for rationalization, reasoning and decoding modules"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def setUp(self):
        torch.manual_seed(8)

    def test_temporal_rationalize_bounds(self):
        """Test the selected frame count never exceeds K_f"""
        out, selection = temporal_rationalize(Rationalizer(8), torch.randn(3, 10, 8), torch.randn(3, 4, 8), 5)
        self.assertEqual(tuple(out.attn_map.shape), (3, 10, 4))
        torch.testing.assert_close(out.attn_map.sum(-1), torch.ones(3, 10))
        self.assertTrue(bool((selection.counts <= 5).all()))
        self.assertTrue(bool((selection.counts >= 1).all()))

    def test_spatial_rationalize_per_frame(self):
        """Test objects are selected independently within each frame"""
        _, selection = spatial_rationalize(Rationalizer(8), torch.randn(2, 3, 4, 8), torch.randn(2, 2, 8), 3)
        self.assertEqual(tuple(selection.indices.shape), (6, 3))
        self.assertTrue(bool((selection.indices < 4).all()))

    def test_single_question_token_ranks_frames_by_content(self):
        """Test one question token still ranks frames by their interaction with it"""
        rationalizer = Rationalizer(2)
        _identity_attention(rationalizer.cross_attn)
        with torch.no_grad():
            rationalizer.self_attn.out_proj.weight.zero_()
            rationalizer.self_attn.out_proj.bias.zero_()
        frames = torch.tensor([[[1.0, 0.0], [3.0, 0.0], [2.0, 0.0], [5.0, 0.0], [0.0, 0.0]]])
        for direction, expected in ((1.0, [1, 2, 3]), (-1.0, [0, 2, 4])):
            out, selection = temporal_rationalize(rationalizer, frames, torch.tensor([[[direction, 0.0]]]), 3)
            torch.testing.assert_close(out.attn_map, torch.ones(1, 5, 1))
            torch.testing.assert_close(out.scores[0, :, 0], direction * frames[0, :, 0] / math.sqrt(2))
            self.assertEqual(selection.indices.tolist(), [expected])

    def test_single_question_token_selection_trains_attention(self):
        """Test perturbed frame selection with one question token reaches the query projection"""
        rationalizer = Rationalizer(4)
        _, selection = temporal_rationalize(
            rationalizer,
            torch.randn(2, 6, 4),
            torch.randn(2, 1, 4),
            3,
            training=True,
            samples=200,
            generator=torch.Generator().manual_seed(0),
        )
        selection.selected.sum().backward()
        grad = rationalizer.cross_attn.q_proj.weight.grad
        self.assertIsNotNone(grad)
        self.assertTrue(bool(torch.isfinite(grad).all()))
        self.assertGreater(float(grad.abs().sum()), 0.0)

    def test_cross_attention_identity(self):
        """Test identity projections with one key return that key"""
        attention = CrossAttention(2)
        _identity_attention(attention)
        out = attention(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[[3.0, 4.0]]]))
        torch.testing.assert_close(out.attn_map, torch.ones(1, 1, 1))
        torch.testing.assert_close(out.tokens, torch.tensor([[[3.0, 4.0]]]))

    def test_cross_attention_without_keys(self):
        """Test a query with no valid key gets a zero update"""
        out = CrossAttention(2)(torch.randn(1, 1, 2), torch.randn(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))
        self.assertTrue(torch.equal(out.tokens, torch.zeros(1, 1, 2)))
        self.assertTrue(torch.equal(out.attn_map, torch.zeros(1, 1, 3)))

    def test_object_free_frame_passes_through(self):
        """Test intra-frame aggregation leaves a frame without objects unchanged"""
        mgr = MultiGrainReasoning(4)
        frames = torch.randn(1, 2, 4)
        objects = torch.randn(1, 2, 3, 4)
        object_valid = torch.tensor([[[False] * 3, [True, False, False]]])
        enhanced = mgr.intra_frame(frames.reshape(2, 1, 4), objects.reshape(2, 3, 4), object_valid.reshape(2, 3))
        self.assertTrue(torch.equal(enhanced.tokens[0], torch.zeros(1, 4)))
        memory, valid = mgr(frames, torch.ones(1, 2, dtype=torch.bool), objects, object_valid, torch.randn(1, 3, 4))
        self.assertEqual(tuple(memory.shape), (1, 5, 4))
        self.assertEqual(valid.tolist(), [[True] * 5])

    def test_decode_mc_permutation_equivariant(self):
        """Test permuting candidates permutes logits identically"""
        decoder = AnswerDecoder(8, 5).double().eval()
        queries = torch.randn(2, 5, 8, dtype=torch.float64)
        memory = torch.randn(2, 6, 8, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        with torch.no_grad():
            logits = decoder.decode_mc(queries, memory)
            permuted = decoder.decode_mc(queries[:, perm], memory)
        torch.testing.assert_close(permuted, logits[:, perm], atol=1e-6, rtol=0)

    def test_decode_mc_single_candidate(self):
        """Test one candidate gives one logit"""
        logits = AnswerDecoder(8, 5).eval().decode_mc(torch.randn(2, 1, 8), torch.randn(2, 3, 8))
        self.assertEqual(tuple(logits.shape), (2, 1))
        torch.testing.assert_close(torch.softmax(logits, -1), torch.ones(2, 1))

    def test_decode_oe(self):
        """Test vocabulary logits and determinism"""
        decoder = AnswerDecoder(8, 7).eval()
        memory = torch.randn(2, 4, 8)
        logits = decoder.decode_oe(memory)
        self.assertEqual(tuple(logits.shape), (2, 7))
        self.assertTrue(torch.equal(logits, decoder.decode_oe(memory)))

    def test_decoder_gradients_match_finite_differences(self):
        """Test multi-choice and open-ended decoding gradients on 20 random instances"""
        check = dict(eps=1e-4, atol=1e-5, rtol=1e-3)
        for seed in range(20):
            with self.subTest(seed=seed):
                torch.manual_seed(seed)
                decoder = AnswerDecoder(4, 3).double().eval()
                queries = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
                memory = torch.randn(2, 5, 4, dtype=torch.float64, requires_grad=True)
                self.assertTrue(torch.autograd.gradcheck(decoder.decode_mc, (queries, memory), **check))
                self.assertTrue(torch.autograd.gradcheck(decoder.decode_oe, (memory,), **check))


class TestTranSTRModel(unittest.TestCase):
    """Test cases for the end-to-end rationalizing model"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def setUp(self):
        torch.manual_seed(9)
        self.clips = torch.randn(2, 8, 6)
        self.objects = torch.randn(2, 8, 5, 6)
        self.tokens = torch.randn(2, 3, 6)

    def test_open_ended_forward(self):
        """Test logits and rationale shapes in inference mode"""
        model = TranSTRModel(6, 8, 4, k_f=3, k_o=2).eval()
        logits, rationale = model(self.clips, self.objects, self.tokens)
        self.assertEqual(tuple(logits.shape), (2, 4))
        self.assertTrue(bool((rationale["frame_valid"].sum(-1) <= 3).all()))
        self.assertEqual(tuple(rationale["object_indices"].shape), (2, 3, 2))

    def test_multi_choice_training_step(self):
        """Test multi-choice decoding trains with the perturbed selection"""
        model = TranSTRModel(6, 8, 4, k_f=3, k_o=2, samples=20, answer_mode=AnswerMode.MULTI_CHOICE, answer_tokens=torch.randn(4, 2, 6))
        model.train()
        logits, _ = model(self.clips, self.objects, self.tokens, torch.Generator().manual_seed(0))
        self.assertEqual(tuple(logits.shape), (2, 4))
        torch.nn.functional.cross_entropy(logits, torch.tensor([0, 3])).backward()
        self.assertIsNotNone(model.frame_proj.weight.grad)

    def test_configuration_errors(self):
        """Test missing answer tokens and objects"""
        with self.assertRaises(ConfigurationError):
            TranSTRModel(6, 8, 4, answer_mode=AnswerMode.MULTI_CHOICE)
        with self.assertRaises(ConfigurationError):
            TranSTRModel(6, 8, 4).eval()(self.clips, None, self.tokens)

    def test_dump_rationales(self):
        """Test rationale dumps list valid frames and their objects"""
        rationale = {
            "frame_indices": torch.tensor([[2, 5, -1]]),
            "frame_valid": torch.tensor([[True, True, False]]),
            "object_indices": torch.tensor([[[0, 3], [1, -1], [-1, -1]]]),
            "object_valid": torch.tensor([[[True, True], [True, False], [False, False]]]),
        }
        with tempfile.TemporaryDirectory() as tmp:
            path = dump_rationales(Path(tmp) / "rationales_val.jsonl", ["v0"], rationale, append=False)
            record = json.loads(path.read_text(encoding="utf-8"))
        self.assertEqual(record, {"id": "v0", "frame_indices": [2, 5], "objects_per_frame_indices": [[0, 3], [1]]})


if __name__ == "__main__":
    unittest.main()
