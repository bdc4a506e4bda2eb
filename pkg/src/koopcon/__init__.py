"""Dataset condensation with a convolutional autoencoder, self-attention and
entropic optimal transport, on a small numpy autodiff engine."""

__version__ = "0.1.0"
