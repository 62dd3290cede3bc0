"""Sleep staging and apnea scoring from nocturnal breathing signals."""

__version__ = "0.1.0"
