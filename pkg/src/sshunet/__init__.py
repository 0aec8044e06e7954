"""Slice-shift UNet: planar convolutions with slice-axis channel shifting and multi-view fusion."""

__version__ = "0.1.0"
