"""Decentralized link scheduling in interference channels with collaborative
per-transmitter neural policies."""

__version__ = "0.1.0"
