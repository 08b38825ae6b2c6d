"""Core domain types and policy abstraction."""
