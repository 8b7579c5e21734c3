"""Deceptive risk minimization."""
