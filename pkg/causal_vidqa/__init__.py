"""
Causal VideoQA Lab Package

A desk-scale laboratory for grounding question-critical scenes in video question
answering, verified on a synthetic benchmark whose causal clips are known.

This package contains the following modules:
- synthgen: Generates synthetic causal VideoQA datasets with controllable bias
- dataset_io: Dataset containers, feature-file loading and batching
- encoders: Recurrent and linear encoders for clips and question tokens
- grounding: Cross-modal attention and Gumbel-Softmax scene splitting
- intervention: Memory bank, scene intervention, mixing and contrastive pairs
- objectives: IGV and EIGV training losses
- backbone: Graph-based VideoQA predictor shared by all predictions
- rationalizer: Spatio-temporal rationalization with differentiable Top-K
- models: ERM, mixup, IGV, EIGV and rationalizer model assemblies
- trainer: Training loops, evaluation and checkpoints
- metrics / report / run_registry: Scoring, report emission and run bookkeeping
"""

__version__ = "1.0.0"
__author__ = "Causal VideoQA Lab"
