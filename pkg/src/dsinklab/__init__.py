"""Desk-scale lab for dual-granularity entropic-transport distillation.

Builds synthetic long-tailed noisy classification tasks, trains two
single-purpose auxiliary classifiers (one imbalance-robust, one
noise-robust), and distills both into a target model through
transport-optimized proxy labels, with baseline arms and an evaluation
suite for controlled comparison.
"""

__version__ = "0.1.0"
