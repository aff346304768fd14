"""Longitudinal survival ensembles: penalized Cox selection, three learners, EA/BMA, MICE with Rubin pooling."""

__version__ = "0.1.0"
