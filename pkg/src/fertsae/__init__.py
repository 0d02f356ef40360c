"""Small-area estimation of age-specific and total fertility from birth histories."""

__version__ = "0.1.0"
