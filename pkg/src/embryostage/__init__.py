"""Weakly-supervised detect-then-classify staging of embryo time-lapse videos."""

__version__ = "0.1.0"
