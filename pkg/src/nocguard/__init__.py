"""nocguard: NoC DDoS traffic simulation and GNN-based detection/localization."""

__version__ = "0.1.0"
