"""Direct data-driven design of forwarding controllers for cascade systems."""

__version__ = "0.1.0"
