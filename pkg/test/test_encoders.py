#!/usr/bin/env python3
"""
Test suite for the recurrent sequence encoders and the linear clip embedding.
"""

import logging
import math
import sys
import unittest
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from causal_vidqa.encoders import SequenceEncoder, VideoQAEncoder
from causal_vidqa.schema import ConfigurationError, DegenerateInputError


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _hand_lstm(inputs, weight=0.5):
    """Scalar LSTM with every weight and bias equal to `weight`"""
    h, c, states = 0.0, 0.0, []
    for x in inputs:
        z = weight * x + weight * h + 2 * weight
        i = f = o = _sigmoid(z)
        g = math.tanh(z)
        c = f * c + i * g
        h = o * math.tanh(c)
        states.append(h)
    return states


def _fill(module, value):
    with torch.no_grad():
        for param in module.parameters():
            param.fill_(value)


class TestSequenceEncoder(unittest.TestCase):
    """Test cases for SequenceEncoder"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_hand_traced_unidirectional(self):
        """Test outputs against a hand-rolled recurrence (d=1, d_h=1, weights 0.5)"""
        encoder = SequenceEncoder(1, 1, bidirectional=False)
        _fill(encoder, 0.5)
        local, global_state = encoder(torch.tensor([[[1.0], [-1.0]]]))
        expected = _hand_lstm([1.0, -1.0])
        for t in range(2):
            self.assertAlmostEqual(float(local[0, t, 0]), expected[t], delta=1e-6)
        self.assertAlmostEqual(float(global_state[0, 0]), expected[-1], delta=1e-6)

    def test_hand_traced_bidirectional(self):
        """Test that the backward direction runs over the reversed sequence"""
        encoder = SequenceEncoder(1, 2)
        _fill(encoder, 0.5)
        local, global_state = encoder(torch.tensor([[[1.0], [-1.0]]]))
        forward = _hand_lstm([1.0, -1.0])
        backward = _hand_lstm([-1.0, 1.0])[::-1]
        for t in range(2):
            self.assertAlmostEqual(float(local[0, t, 0]), forward[t], delta=1e-6)
            self.assertAlmostEqual(float(local[0, t, 1]), backward[t], delta=1e-6)
        self.assertAlmostEqual(float(global_state[0, 0]), forward[-1], delta=1e-6)
        self.assertAlmostEqual(float(global_state[0, 1]), backward[0], delta=1e-6)

    def test_single_step_global_equals_local(self):
        """Test K=1 gives a global state equal to the only local row"""
        torch.manual_seed(0)
        encoder = SequenceEncoder(4, 8)
        local, global_state = encoder(torch.randn(3, 1, 4))
        torch.testing.assert_close(global_state, local[:, 0])

    def test_zero_parameters_zero_input(self):
        """Test that zero parameters and input give the activation-of-zero constants"""
        encoder = SequenceEncoder(3, 4)
        _fill(encoder, 0.0)
        local, global_state = encoder(torch.zeros(2, 5, 3))
        # g = tanh(0) = 0 keeps the cell at zero, so every hidden state is 0
        self.assertTrue(torch.equal(local, torch.zeros_like(local)))
        self.assertTrue(torch.equal(global_state, torch.zeros_like(global_state)))

    def test_lengths_match_truncated_sequence(self):
        """Test packed encoding equals encoding the valid prefix"""
        torch.manual_seed(1)
        encoder = SequenceEncoder(3, 6)
        x = torch.randn(2, 5, 3)
        local, global_state = encoder(x, torch.tensor([3, 5]))
        _, prefix_global = encoder(x[:1, :3])
        torch.testing.assert_close(global_state[:1], prefix_global, atol=1e-6, rtol=1e-5)
        self.assertTrue(torch.equal(local[0, 3:], torch.zeros_like(local[0, 3:])))

    def test_empty_sequence_rejected(self):
        """Test degenerate inputs"""
        encoder = SequenceEncoder(3, 4)
        with self.assertRaises(DegenerateInputError):
            encoder(torch.zeros(1, 0, 3))
        with self.assertRaises(DegenerateInputError):
            encoder(torch.zeros(2, 3, 3), torch.tensor([0, 3]))

    def test_odd_bidirectional_hidden_rejected(self):
        """Test that bidirectional encoders need an even hidden size"""
        with self.assertRaises(ConfigurationError):
            SequenceEncoder(3, 5)

    def test_gradient_matches_finite_differences(self):
        """Test sum(q_global) gradient against central differences"""
        torch.manual_seed(2)
        encoder = SequenceEncoder(3, 4).double()
        tokens = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)
        self.assertTrue(
            torch.autograd.gradcheck(lambda x: encoder(x)[1].sum(), (tokens,), eps=1e-4, atol=1e-6, rtol=1e-4)
        )


class TestVideoQAEncoder(unittest.TestCase):
    """Test cases for the paired video/question encoder"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def setUp(self):
        torch.manual_seed(3)
        self.encoder = VideoQAEncoder(3, 4)

    def test_shapes(self):
        """Test local and global shapes"""
        video = self.encoder.encode_video(torch.randn(2, 6, 3))
        question = self.encoder.encode_question(torch.randn(2, 4, 3))
        self.assertEqual(tuple(video.v_local.shape), (2, 6, 4))
        self.assertEqual(tuple(video.v_global.shape), (2, 4))
        self.assertEqual(tuple(question.q_local.shape), (2, 4, 4))
        self.assertEqual(tuple(question.q_global.shape), (2, 4))

    def test_shared_definition(self):
        """Test identical parameters and inputs give identical video and question encodings"""
        self.encoder.question_encoder.load_state_dict(self.encoder.video_encoder.state_dict())
        x = torch.randn(2, 5, 3)
        video = self.encoder.encode_video(x)
        question = self.encoder.encode_question(x)
        self.assertTrue(torch.equal(video.v_local, question.q_local))
        self.assertTrue(torch.equal(video.v_global, question.q_global))

    def test_linear_identity(self):
        """Test identity weights and zero bias reproduce the input"""
        encoder = VideoQAEncoder(4, 4)
        with torch.no_grad():
            encoder.video_linear.weight.copy_(torch.eye(4))
            encoder.video_linear.bias.zero_()
        x = torch.randn(2, 3, 4)
        torch.testing.assert_close(encoder.embed_video_linear(x), x)

    def test_linear_zero_weights(self):
        """Test zero weights broadcast the bias"""
        with torch.no_grad():
            self.encoder.video_linear.weight.zero_()
            self.encoder.video_linear.bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
        out = self.encoder.embed_video_linear(torch.randn(1, 2, 3))
        torch.testing.assert_close(out, torch.tensor([[[1.0, 2.0, 3.0, 4.0]] * 2]))

    def test_linear_matches_matrix_product(self):
        """Test a random 2x3 clip matrix against an explicit product"""
        x = torch.randn(1, 2, 3)
        weight, bias = self.encoder.video_linear.weight, self.encoder.video_linear.bias
        expected = x @ weight.T + bias
        torch.testing.assert_close(self.encoder.embed_video_linear(x), expected)


if __name__ == "__main__":
    unittest.main()
