"""Dense 1D convolutional regression of continuous emotion labels trained on CCC."""

__version__ = "0.1.0"
