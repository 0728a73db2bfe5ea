"""Modules package for the PANIC system."""
