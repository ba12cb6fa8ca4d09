"""Experiment orchestration, model files and the command line."""
