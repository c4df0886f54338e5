"""Polymer-expansion renormalization group engine for the 2D sine-Gordon model."""

__version__ = "0.1.0"
