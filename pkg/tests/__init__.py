"""Tests for the battery-forecast package."""
