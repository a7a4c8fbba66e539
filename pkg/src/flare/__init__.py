"""Flow-matching manipulation policy with future latent representation alignment."""

__version__ = "0.1.0"
