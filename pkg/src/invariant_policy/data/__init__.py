"""Logged-data CSV I/O, ingestion validation and tabular datasets."""
