"""Audio aesthetics score prediction: GR-KAN heads, boosted metric fusion, stacking."""

__version__ = "0.1.0"
