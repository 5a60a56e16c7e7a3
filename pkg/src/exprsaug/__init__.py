"""Augment missing sample metadata from small-RNA expression profiles.

The package trains two from-scratch classifiers (a fully-connected
neural network and a two-stage random forest) on expression matrices to
predict tissue group, sex, or age interval, evaluates them with k-fold
and one-dataset-out validation, and explains the neural model with
per-feature contribution scores and knockout analysis.
"""

__version__ = "0.1.0"
