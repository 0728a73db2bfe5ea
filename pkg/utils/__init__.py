"""Utilities package for the PANIC system."""
