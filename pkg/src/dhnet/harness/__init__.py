"""Synthetic data, training, evaluation and checkpoint persistence."""
