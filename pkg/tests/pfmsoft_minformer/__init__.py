"""Test suite for the pfmsoft.minformer package."""
