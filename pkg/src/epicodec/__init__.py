"""Latent side-information coding of multi-view video via spatio-temporal EPIs."""

__version__ = "0.1.0"

__all__ = ["EpiCodec", "__version__"]


def __getattr__(name):
    # scikit-learn is only imported when the estimator is actually used
    if name == "EpiCodec":
        from .estimator import EpiCodec
        return EpiCodec
    raise AttributeError(f"module 'epicodec' has no attribute {name!r}")
