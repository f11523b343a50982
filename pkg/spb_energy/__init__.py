"""Peer-to-peer energy trading over a simulated blockchain."""
