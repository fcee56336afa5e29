"""Unified vision-motion code learning and policy training on a synthetic manipulation world."""

__version__ = "0.1.0"
