"""Day/night paired data collection by trajectory tracking and pose matching."""

__version__ = "0.1.0"
