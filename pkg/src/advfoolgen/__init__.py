"""Benchmark toolkit for a generative black-box attack on image classifiers.

The package covers the full experiment pipeline: dataset handling, a desk-scale
target classifier, the attack generator and its baselines, a defense suite,
fooling-ratio evaluation, and statistical analysis of attack-image
distributions across generator epochs.
"""

__version__ = "0.1.0"
