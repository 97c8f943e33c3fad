"""Volt-VAR control benchmark: radial branch-flow simulator, Gym-like
environment, operational data pipeline, factored DQN baseline, and a
FastAPI service with a thin CLI client."""

__version__ = "0.1.0"
