"""
Core infrastructure: configuration, schemas, errors and shared tools
"""

__version__ = "1.0.0"
