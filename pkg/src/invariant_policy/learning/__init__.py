"""Off-policy optimization and invariant policy learning."""
