"""Main entry point for streamground package."""

from . import _env_setup  # noqa: F401  thread limits before numpy

from .cli import main

if __name__ == "__main__":
    main()
