"""Learned deviation-payoff models for auction game families and reserve-price design."""

__version__ = "0.1.0"
