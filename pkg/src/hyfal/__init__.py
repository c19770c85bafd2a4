"""Falsification of hybrid systems through learned neural hybrid automata."""
