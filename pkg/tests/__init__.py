"""Tests del simulador QKD."""
