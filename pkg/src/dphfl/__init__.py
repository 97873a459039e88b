"""Simulator and analysis toolkit for differentially-private hierarchical federated learning."""

__version__ = "0.1.0"
