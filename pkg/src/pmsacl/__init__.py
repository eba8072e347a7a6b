"""PMSACL pre-training and downstream anomaly detection at desk scale."""

__version__ = "0.1.0"
