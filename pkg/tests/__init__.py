"""Tests for edge-deid."""
