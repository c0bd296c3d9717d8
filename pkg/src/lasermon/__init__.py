"""Surface-roughness prediction for laser micromachining from laser
parameters and photodiode sensor features."""

__version__ = "0.1.0"
