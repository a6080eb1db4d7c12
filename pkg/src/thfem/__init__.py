"""Two-stage expression editing plus adjacent-frame talking-head regeneration."""

__version__ = "0.1.0"
