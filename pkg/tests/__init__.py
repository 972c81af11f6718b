"""Tests package for NRTR."""
