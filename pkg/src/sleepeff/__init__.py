"""Sleep-efficiency prediction from wearable and survey features with 1D CNNs
and a random-forest baseline."""

__version__ = "0.1.0"
