#!/usr/bin/env python3
"""
Test suite for the IGV and EIGV training losses.
"""

import logging
import math
import sys
import unittest
from pathlib import Path

import torch
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent.parent))

from causal_vidqa.objectives import (
    causal_loss,
    consistency_loss,
    eigv_objective,
    environment_loss,
    igv_objective,
    info_nce,
    soft_cross_entropy,
)
from causal_vidqa.schema import ConfigurationError, LossWeights, PredictionDistribution


def _dist(probs):
    return PredictionDistribution(logits=torch.log(torch.tensor([probs], dtype=torch.float64)))


# Near one-hot over 4 classes; the other classes carry ~e^-100 mass
ONE_HOT_LOGITS = torch.tensor([[100.0, 0.0, 0.0, 0.0]], dtype=torch.float64)


class TestIGVLosses(unittest.TestCase):
    """Test cases for the causal, environment and consistency losses"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_causal_loss(self):
        """Test cross-entropy at one-hot and uniform predictions"""
        self.assertAlmostEqual(float(causal_loss(ONE_HOT_LOGITS, torch.tensor([0]))), 0.0, delta=1e-8)
        self.assertAlmostEqual(float(causal_loss(_dist([0.25] * 4), torch.tensor([2]))), math.log(4), delta=1e-8)

    def test_causal_loss_nonnegative(self):
        """Test cross-entropy is nonnegative on random logits"""
        generator = torch.Generator().manual_seed(0)
        logits = torch.randn(16, 5, generator=generator)
        answers = torch.randint(0, 5, (16,), generator=generator)
        self.assertGreaterEqual(float(causal_loss(logits, answers)), 0.0)

    def test_environment_loss(self):
        """Test KL to uniform at uniform and one-hot predictions"""
        self.assertAlmostEqual(float(environment_loss(_dist([0.25] * 4))), 0.0, delta=1e-8)
        self.assertAlmostEqual(float(environment_loss(ONE_HOT_LOGITS)), math.log(4), delta=1e-8)
        logits = torch.randn(32, 6, generator=torch.Generator().manual_seed(1))
        self.assertGreaterEqual(float(environment_loss(logits)), 0.0)

    def test_consistency_loss(self):
        """Test KL([0.5, 0.5] || [0.9, 0.1]) and its asymmetry"""
        p, q = _dist([0.5, 0.5]), _dist([0.9, 0.1])
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        self.assertAlmostEqual(float(consistency_loss(p, q)), expected, delta=1e-4)
        self.assertAlmostEqual(expected, 0.5108, delta=1e-4)
        self.assertAlmostEqual(float(consistency_loss(p, p)), 0.0, delta=1e-12)
        self.assertNotAlmostEqual(float(consistency_loss(q, p)), float(consistency_loss(p, q)), places=3)

    def test_consistency_detects_perturbation(self):
        """Test KL is zero only when the distributions agree"""
        p = torch.log_softmax(torch.randn(1, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2)), -1)
        for eps in (1e-1, 1e-2, 1e-3):
            shifted = torch.log_softmax(p + torch.tensor([[eps, 0.0, 0.0, 0.0]], dtype=torch.float64), -1)
            self.assertGreater(float(consistency_loss(p, shifted)), 0.0)

    def test_igv_objective(self):
        """Test the weighted sum"""
        lc, le, lv = torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)
        self.assertAlmostEqual(float(igv_objective(lc, le, lv, LossWeights(1.0, 1.0))), 6.0)
        self.assertAlmostEqual(float(igv_objective(lc, le, lv, LossWeights(0.0, 0.0))), 1.0)
        self.assertAlmostEqual(float(igv_objective(lc, le, lv, LossWeights(0.5, 2.0))), 8.0)

    def test_negative_weights_rejected(self):
        """Test loss weights must be nonnegative"""
        with self.assertRaises(ConfigurationError):
            LossWeights(igv_lambda1=-1.0)

    def test_gradients_match_finite_differences(self):
        """Test causal, environment and consistency gradients on 20 random instances"""
        for seed in range(20):
            with self.subTest(seed=seed):
                generator = torch.Generator().manual_seed(seed)
                x = torch.randn(3, 4, dtype=torch.float64, generator=generator, requires_grad=True)
                y = torch.randn(3, 4, dtype=torch.float64, generator=generator, requires_grad=True)
                answers = torch.randint(0, 4, (3,), generator=generator)
                check = dict(eps=1e-4, atol=1e-6, rtol=1e-4)
                self.assertTrue(torch.autograd.gradcheck(lambda z: causal_loss(z, answers), (x,), **check))
                self.assertTrue(torch.autograd.gradcheck(environment_loss, (x,), **check))
                self.assertTrue(torch.autograd.gradcheck(consistency_loss, (x, y), **check))


class TestEIGVLosses(unittest.TestCase):
    """Test cases for soft cross-entropy, InfoNCE and the aggregate"""

    @classmethod
    def setUpClass(cls):
        """Set up logging once for all tests"""
        logging.basicConfig(level=logging.ERROR)

    def test_soft_cross_entropy(self):
        """Test soft labels reduce to cross-entropy and the half/half case"""
        self.assertAlmostEqual(
            float(soft_cross_entropy(_dist([0.5, 0.5]), torch.tensor([[0.5, 0.5]], dtype=torch.float64))),
            math.log(2),
            delta=1e-8,
        )
        logits = torch.randn(4, 3, generator=torch.Generator().manual_seed(4))
        answers = torch.tensor([0, 2, 1, 1])
        torch.testing.assert_close(soft_cross_entropy(logits, F.one_hot(answers, 3).float()), causal_loss(logits, answers))

    def test_soft_cross_entropy_minimized_at_target(self):
        """Test cross-entropy against a_star is lowest when probs equal a_star"""
        a_star = torch.tensor([[0.7, 0.2, 0.1]], dtype=torch.float64)
        at_target = float(soft_cross_entropy(torch.log(a_star), a_star))
        for probs in ([0.6, 0.3, 0.1], [0.8, 0.1, 0.1], [1 / 3] * 3):
            other = torch.log(torch.tensor([probs], dtype=torch.float64))
            self.assertGreater(float(soft_cross_entropy(other, a_star)), at_target)

    def test_info_nce_symmetric(self):
        """Test equal positive and negative similarity gives ln 2"""
        anchor = torch.tensor([1.0, 2.0], dtype=torch.float64)
        self.assertAlmostEqual(float(info_nce(anchor, anchor, [anchor.clone()])), math.log(2), delta=1e-8)

    def test_info_nce_direct_evaluation(self):
        """Test a.a+ = 1 and a.a- = 0 gives -log(e / (e + 1))"""
        loss = info_nce(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]), [torch.tensor([0.0, 1.0])])
        self.assertAlmostEqual(float(loss), -math.log(math.e / (math.e + 1)), delta=1e-6)
        self.assertAlmostEqual(float(loss), 0.3133, delta=1e-4)

    def test_info_nce_monotone_in_positive(self):
        """Test the loss falls as the positive similarity rises"""
        anchor, negative = torch.tensor([1.0, 0.0]), [torch.tensor([0.3, 1.0])]
        losses = [float(info_nce(anchor, torch.tensor([s, 0.0]), negative)) for s in (-1.0, 0.0, 1.0, 2.0)]
        self.assertEqual(losses, sorted(losses, reverse=True))
        self.assertEqual(len(set(losses)), 4)

    def test_info_nce_matches_index_zero_cross_entropy(self):
        """Test batched InfoNCE equals cross-entropy of similarity logits at index 0"""
        generator = torch.Generator().manual_seed(5)
        anchor, positive = torch.randn(4, 3, generator=generator), torch.randn(4, 3, generator=generator)
        negatives = torch.randn(4, 2, 3, generator=generator)
        logits = torch.cat([(anchor * positive).sum(-1, keepdim=True), torch.einsum("bd,bnd->bn", anchor, negatives)], -1)
        target = F.one_hot(torch.zeros(4, dtype=torch.long), 3).float()
        torch.testing.assert_close(info_nce(anchor, positive, negatives), soft_cross_entropy(logits, target))

    def test_info_nce_needs_negatives(self):
        """Test empty negatives raise"""
        with self.assertRaises(ConfigurationError):
            info_nce(torch.ones(2), torch.ones(2), [])

    def test_info_nce_gradient(self):
        """Test InfoNCE gradient against central differences"""
        generator = torch.Generator().manual_seed(6)
        tensors = [torch.randn(2, 3, dtype=torch.float64, generator=generator, requires_grad=True) for _ in range(3)]
        self.assertTrue(
            torch.autograd.gradcheck(lambda a, p, n: info_nce(a, p, [n]), tuple(tensors), eps=1e-4, atol=1e-6, rtol=1e-4)
        )

    def test_soft_cross_entropy_gradient(self):
        """Test soft cross-entropy gradients in logits and soft labels on 20 random instances"""
        for seed in range(20):
            with self.subTest(seed=seed):
                generator = torch.Generator().manual_seed(100 + seed)
                logits = torch.randn(3, 5, dtype=torch.float64, generator=generator, requires_grad=True)
                a_star = torch.softmax(torch.randn(3, 5, dtype=torch.float64, generator=generator), -1)
                a_star.requires_grad_(True)
                self.assertTrue(
                    torch.autograd.gradcheck(soft_cross_entropy, (logits, a_star), eps=1e-4, atol=1e-6, rtol=1e-4)
                )

    def test_eigv_objective(self):
        """Test the aggregate with the default balance ratio"""
        self.assertAlmostEqual(float(eigv_objective(torch.tensor(1.0), torch.tensor(2.0), 0.75)), 2.5)
        self.assertAlmostEqual(float(eigv_objective(torch.tensor(1.0), torch.tensor(2.0), 0.0)), 1.0)
        self.assertEqual(LossWeights().beta, 0.75)


if __name__ == "__main__":
    unittest.main()
