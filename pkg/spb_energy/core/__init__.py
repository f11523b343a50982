"""Core protocol and simulation modules."""
