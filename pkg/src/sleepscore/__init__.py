"""Sleep state scoring of wide-field calcium imaging recordings.

A CNN feature extractor applied frame by frame feeds a bidirectional LSTM
with additive temporal attention that classifies each epoch as wakefulness,
NREM, or REM. The package covers the full workflow: synthetic data
generation, fluorescence preprocessing, epoching and splits, training with
focal loss, evaluation (agreement, fragmentation, band power), and
interpretability (Grad-CAM, attention traces).
"""

__version__ = "0.1.0"
