"""Insole-pressure to ground-reaction-force regression with anatomical-region attention.

Submodules:
    autodiff: float64 tensors with reverse-mode gradients.
    preprocess: filtering, gait events, synchronisation and stance resampling.
    priors: foot partition and temporal activation prior.
    encodings: sensor coordinates, centre of pressure and Fourier features.
    model: configurations, parameters and the forward pass of every variant.
    training: losses, AdamW, schedules and the training loop.
    evaluation: metrics, folds and cross-validation.
    io: binary containers, checkpoints and raw text ingestion.
    cli: the ``dprgnet`` command.
"""

__version__ = "0.1.0"
