"""Convenience wrapper for layerqe to run directly from source tree."""

from layerqe.cli import cli

if __name__ == "__main__":
    cli()
