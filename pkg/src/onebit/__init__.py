"""One-bit massive-MIMO uplink detection: system model, model-based and
regularised neural detectors, training and Monte-Carlo evaluation."""

__version__ = "0.1.0"
