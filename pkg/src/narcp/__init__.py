"""Normalized action rewards and consistency policy alignment in a 10 Hz pursuit lab."""
