"""Tests for MSMA-Sim."""
