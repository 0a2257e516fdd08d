"""Data-dependent upsampling (DUpsampling) toolkit for dense label prediction."""

__version__ = "0.1.0"
