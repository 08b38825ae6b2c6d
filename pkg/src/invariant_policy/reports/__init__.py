"""Output writers and run manifests."""
