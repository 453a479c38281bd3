"""Tests for the EA-GCL cross-domain recommender."""
