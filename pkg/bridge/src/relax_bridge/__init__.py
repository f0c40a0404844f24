"""Reference embedding server for the external-extractor wire protocol."""

from relax_bridge.server import main

__all__ = ["main"]
