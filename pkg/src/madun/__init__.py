"""Memory-augmented deep unfolding for compressive sensing, on a small numpy autodiff core."""

__version__ = "0.1.0"
