"""Federated learning on a fixed hyperspherical classifier, with closed-form head calibration."""

__version__ = "0.1.0"
