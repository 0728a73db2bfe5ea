"""Tests package for PANIC."""
