"""Non-intrusive PESQ estimation for coded wideband speech."""

__version__ = "0.1.0"
