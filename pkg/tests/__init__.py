"""
Test suite for the feature-kernel toolkit
"""
