"""Georeference formal jobs onto street faces by postal code and address species."""

__version__ = "0.1.0"
