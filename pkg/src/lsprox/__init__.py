"""Low-rank + sparse decomposition and unsupervised background subtraction."""

__version__ = "0.1.0"
