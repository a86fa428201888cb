"""RGB to thermal image translation with conditional GANs."""

__version__ = "0.1.0"
