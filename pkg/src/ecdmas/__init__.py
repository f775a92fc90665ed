"""Evidence-centered multi-agent generation of NGSS assessment items, plus rating analytics."""

__version__ = "0.1.0"
