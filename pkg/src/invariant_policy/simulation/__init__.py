"""Linear/Gaussian SCM simulator."""
