"""Tendon segmentation and tendinopathy recognition toolkit."""
__version__ = "0.1.0"
