"""Desk-scale federated re-ID simulator with adaptive pruning and sparse-aware aggregation."""
