"""Federated ECG page segmentation and digitization on synthetic multi-site data."""

__version__ = "0.1.0"
