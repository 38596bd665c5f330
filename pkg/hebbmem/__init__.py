"""Spiking networks with Hebbian key-value memory, trained by BPTT."""

__version__ = "0.1.0"
