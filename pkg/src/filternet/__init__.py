"""FilterNet: encoder-decoder segmentation with a trainable Laplacian/Gaussian edge gate."""

__version__ = "0.1.0"

CLASS_NAMES = ("BG", "TA", "TP", "Sol", "Gas", "PL")
NUM_CLASSES = len(CLASS_NAMES)
