"""Datasets, file formats and the procedural oracle scenes."""
