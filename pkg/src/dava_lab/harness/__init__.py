"""Configuration, sweeps, persistence and reporting."""
