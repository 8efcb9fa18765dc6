"""Dyck-2 LSTM memory laboratory."""

__version__ = "0.1.0"
