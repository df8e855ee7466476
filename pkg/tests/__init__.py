"""Tests for spikeflow."""
