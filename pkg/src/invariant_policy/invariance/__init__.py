"""Off-policy invariance testing."""
