"""Neural Programming Interfaces for a frozen toy transformer LM."""

__version__ = "0.1.0"
