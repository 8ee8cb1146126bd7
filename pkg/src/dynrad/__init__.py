"""dynrad: desk-scale dynamic neural radiance fields for monocular video."""

__version__ = "0.1.0"
