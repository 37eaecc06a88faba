"""4D temporal-spatial convolutional networks for fMRI classification, in numpy."""

__version__ = "0.1.0"
