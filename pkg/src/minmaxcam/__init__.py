"""MinMaxCAM: CAM-based weakly supervised localization with common- and
full-region regularization of the classifier head."""

__version__ = "0.1.0"
