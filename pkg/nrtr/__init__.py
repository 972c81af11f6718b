"""NRTR - neuron reconstruction as direct set prediction on 3D image blocks."""

try:
    from ._version import __version__
except ImportError:
    __version__ = "0.1.0"

__all__ = ["__version__"]
