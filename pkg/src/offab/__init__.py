"""Offline A/B testing of ranking policies with capped importance sampling."""

__version__ = "0.1.0"
