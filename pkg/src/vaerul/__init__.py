"""Semi-supervised remaining-useful-life estimation with a recurrent variational autoencoder."""

__version__ = "0.1.0"
