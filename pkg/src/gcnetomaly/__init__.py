"""Graph-convolutional VAE anomaly detection over machine communication graphs."""

__version__ = "0.1.0"
