"""Contrastive pretraining on temporally revisited overhead imagery, with label-efficiency evaluation."""

__version__ = "0.1.0"
