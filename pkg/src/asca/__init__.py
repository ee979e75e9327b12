"""ASCA: a hybrid convolution / relative-attention audio spectrogram classifier
on a small numpy autodiff engine."""

__version__ = "0.1.0"
