"""Two-stage vehicle detector for aerial imagery, built on an in-repo autodiff tape."""

__version__ = "0.1.0"
