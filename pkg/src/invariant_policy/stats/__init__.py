"""Statistical primitives."""
