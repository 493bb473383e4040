"""Coarse-to-fine heat-map joint localization on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
