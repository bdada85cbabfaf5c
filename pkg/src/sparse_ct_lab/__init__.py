"""Sparse-view CT workbench.

Simulates sparse-projection acquisitions of synthetic thorax slices,
removes streak artifacts with a residual-learning dual-frame U-Net, and
runs a blinded multireader study with the accompanying statistics.
"""

__version__ = "0.1.0"
