"""Masked wireless modeling: pretraining, fine-tuning, simulation, evaluation."""

__version__ = "0.1.0"
