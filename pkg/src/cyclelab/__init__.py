"""Cycle-level traffic signal control: grid simulator, hybrid-action PDQN agents and classical baselines."""

__version__ = "0.1.0"
