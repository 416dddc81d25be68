"""
Unit tests for the feature-kernel toolkit
"""
