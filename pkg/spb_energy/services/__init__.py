"""Service layer for experiments and interactive sessions."""
