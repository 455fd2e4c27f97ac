"""Feature-level future-interaction modeling for multi-agent motion prediction."""

__version__ = "0.1.0"
