"""Desk-scale multilingual MoE CTC encoder with LID routing and expert pruning."""

__version__ = "0.1.0"
