"""Location-guided autoregressive document OCR at desk scale."""

__version__ = "0.1.0"
