"""Sequential EHR disease-onset prediction pipeline."""

__version__ = "0.1.0"
