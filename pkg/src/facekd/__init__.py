"""Cross-architecture face-recognition distillation toolkit.

A numpy-only reverse-mode autodiff engine, a windowed-attention teacher with
adaptable prompts, a convolutional student, attention over learnable local
centers with facial positional encoding, reciprocal alignment losses, a
gradient-based receptive-field analyzer, and a synthetic-face training
harness with a CLI.
"""

__version__ = "0.1.0"
