"""layerqe package."""

try:
    from ._version import __version__  # type: ignore
except ImportError:  # pragma: no cover - source tree that was never built
    __version__ = "0.0.0"

__all__ = ["__version__"]
