"""Module entry point for ``python -m tractfield``."""

from .cli import entry

if __name__ == "__main__":
    entry()
