"""LSTM encoder-decoder anomaly detection for checkpoint-split trajectories."""
__version__ = "0.1.0"
