"""Sequence-to-sequence sleep staging with deep transfer learning.

The package is organized the way a staging experiment flows:

- ``recordings``: EDF parsing, scoring-standard conversion, epoch grid
- ``features``: log-power spectrogram extraction and normalization
- ``autodiff``: the numpy reverse-mode engine the models run on
- ``layers`` / ``models``: network building blocks and the two seq2seq nets
- ``training``: Adam, batching, early stopping, learning curves
- ``transfer``: parameter-group freezing and finetuning strategies
- ``inference``: sliding-window ensembling and performance metrics
- ``synthdomain``: seeded synthetic recording generators for experiments
- ``cli``: the end-to-end command surface
"""
from __future__ import annotations

__version__ = "0.1.0"
