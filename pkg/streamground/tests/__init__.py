"""Tests for the streamground package."""
