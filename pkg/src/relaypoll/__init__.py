"""Relay-robot routing: channel prediction, region partitioning, wait-time optimisation and simulation."""
