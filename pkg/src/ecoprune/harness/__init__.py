"""CLI, configuration, persistence and experiment drivers."""
