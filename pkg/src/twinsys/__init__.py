"""Twin-system explanation-by-example: a numpy feed-forward network paired
with a feature-weighted k-NN case base that retrieves precedent cases for
each network prediction."""

__version__ = "0.1.0"
