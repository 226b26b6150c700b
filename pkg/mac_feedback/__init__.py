"""MAC Feedback - linear sequential coding for the two-sender Gaussian MAC with active noisy feedback."""

__version__ = "0.1.0"
