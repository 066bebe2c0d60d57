"""Zero-shot composed image retrieval via textual inversion."""

__version__ = "0.1.0"
