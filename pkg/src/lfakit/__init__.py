"""Curation engine for face videos with wide head-pose range, plus a MoFE numeric reference."""

__version__ = "0.1.0"
