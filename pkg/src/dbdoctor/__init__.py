"""dbdoctor: LLM-driven database anomaly diagnosis, reproducible offline."""

__version__ = "0.1.0"
