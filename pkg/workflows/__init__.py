"""
Workflows: the experiment runner command line
"""

__version__ = "1.0.0"
