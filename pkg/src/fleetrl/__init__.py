"""Offline-to-online RL for chunked flow policies with a simulated fleet data plane."""

__version__ = "0.1.0"
