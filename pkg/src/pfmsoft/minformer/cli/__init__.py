"""Command line interface for minformer."""
