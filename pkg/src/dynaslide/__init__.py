"""DynaSlide: deterministic benchmark factory and agent pipeline for
database-grounded slide updates."""

__version__ = "0.1.0"
